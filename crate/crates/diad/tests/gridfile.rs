use std::path::Path;

use diad::gridfile;
use diad::Error;
use diad_core::image::Grid;

fn sample() -> Grid {
    let data = (0..35).map(|i| (i as f64 * 0.37).sin() * 1.5).collect();
    Grid::from_vec(5, 7, data).unwrap()
}

#[test]
fn round_trip_preserves_shape_and_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/map.grid");
    let g = sample();
    gridfile::write(&path, &g).unwrap();
    let back = gridfile::read(&path).unwrap();
    assert_eq!(back.dims(), (5, 7));
    for (a, b) in g.data().iter().zip(back.data()) {
        assert_eq!(*b, f64::from(*a as f32));
    }
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 4 * 35);
}

#[test]
fn corrupt_files_are_format_errors() {
    let p = Path::new("x.grid");
    let good = gridfile::encode(&sample());
    assert!(matches!(
        gridfile::decode(&good[..20], p),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        gridfile::decode(b"PNG\0whatever1234", p),
        Err(Error::Format { .. })
    ));
    let mut bad_dtype = good.clone();
    bad_dtype[4] = 9;
    assert!(gridfile::decode(&bad_dtype, p).is_err());
    assert!(gridfile::decode(&good, p).is_ok());
}
