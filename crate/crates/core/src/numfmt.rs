//! Deterministic number and JSON formatting.
//!
//! Every float leaving the crate is written with 17 significant digits, which
//! round-trips any `f64` exactly. JSON documents are rendered by a small
//! writer so that numbers get the same treatment and key order is preserved.

use serde_json::Value;
use std::fmt::Write as _;

/// Format a float with 17 significant digits in scientific notation.
///
/// Non-finite values are rendered as `NaN`, `inf` or `-inf`.
///
/// ```
/// assert_eq!(gsc::numfmt::fmt_f64(0.25), "2.5000000000000000e-1");
/// let x = 0.1_f64 + 0.2;
/// assert_eq!(gsc::numfmt::fmt_f64(x).parse::<f64>().unwrap(), x);
/// ```
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Convert a float into a JSON value; non-finite values become `null`.
pub fn json_f64(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

pub fn json_vec(xs: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(xs.into_iter().map(json_f64).collect())
}

/// Render a JSON value with two-space indentation, writing floats through
/// [`fmt_f64`]. Integers are written as integers.
pub fn to_json_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_f64(n.as_f64().unwrap()));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if items.iter().all(|x| !x.is_array() && !x.is_object()) {
                out.push('[');
                for (k, x) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, depth + 1);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (k, x) in items.iter().enumerate() {
                    indent(out, depth + 1);
                    write_value(out, x, depth + 1);
                    if k + 1 < items.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                indent(out, depth);
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (k, (key, x)) in map.iter().enumerate() {
                indent(out, depth + 1);
                out.push_str(&serde_json::to_string(key).unwrap());
                out.push_str(": ");
                write_value(out, x, depth + 1);
                if k + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(out, depth);
            out.push('}');
        }
    }
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn writer_keeps_key_order_and_floats() {
        let v = json!({"b": 1, "a": [0.5, null], "c": {"x": -2.0}});
        let s = to_json_string(&v);
        assert!(s.find("\"b\"").unwrap() < s.find("\"a\"").unwrap());
        assert!(s.contains("5.0000000000000000e-1"));
        assert!(s.contains("-2.0000000000000000e0"));
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["c"]["x"].as_f64(), Some(-2.0));
        assert_eq!(back["b"].as_u64(), Some(1));
    }

    #[test]
    fn nan_becomes_null() {
        assert_eq!(json_f64(f64::NAN), Value::Null);
    }

    proptest! {
        #[test]
        fn float_text_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
            let s = to_json_string(&json_f64(x));
            let back: f64 = serde_json::from_str(s.trim()).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
