use gsc::panel::{load_panel, read_panel, save_panel, CsvOptions, Panel};
use gsc::randlab::gaussian_panel;
use gsc::Error;
use nalgebra::DMatrix;

#[test]
fn large_panel_round_trips_through_disk() {
    let base = gaussian_panel(50, 40, 11);
    let y = DMatrix::from_fn(50, 40, |i, s| base.y()[(i, s)] * 10f64.powi((i % 7) as i32 - 3));
    let units = (0..50).map(|i| format!("state {i:02}")).collect();
    let periods = (0..40).map(|s| format!("{}", 1980 + s)).collect();
    let panel = Panel::from_matrix(units, periods, y).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    save_panel(&panel, &path).unwrap();
    let back = load_panel(&path, &CsvOptions::default()).unwrap();
    assert_eq!(back, panel);
}

#[test]
fn semicolon_dialect_and_blank_lines() {
    let text = "unit;2000;2001\nA;1;2\n\nB;3;4.5\n";
    let p = read_panel(text.as_bytes(), &CsvOptions { delimiter: b';' }).unwrap();
    assert_eq!(p.units(), ["A", "B"]);
    assert_eq!(p.y()[(1, 1)], 4.5);
}

#[test]
fn errors_point_at_the_cell() {
    let err = read_panel("unit,1,2\nA,1,x\n".as_bytes(), &CsvOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    let msg = err.to_string();
    assert!(msg.contains("line 2") && msg.contains("column 3"), "{msg}");
    let ragged = read_panel("unit,1,2\nA,1\n".as_bytes(), &CsvOptions::default()).unwrap_err();
    assert!(ragged.to_string().contains("expected 3 fields"));
    let missing = load_panel("/nonexistent/panel.csv", &CsvOptions::default()).unwrap_err();
    assert!(matches!(missing, Error::Io(_)));
}
