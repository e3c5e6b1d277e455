use privacyface::linalg::Matrix;
use privacyface_cli::embeddings::{encode, read, read_raw, Format};
use proptest::prelude::*;

fn unit_rows() -> impl Strategy<Value = Matrix> {
    (1usize..6, 2usize..9).prop_flat_map(|(n, d)| {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), n).prop_filter_map("zero row", |rows| {
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(|x| ((x / n) as f32) as f64).collect()
                })
                .collect();
            rows.iter().all(|r| r.iter().all(|x| x.is_finite())).then(|| Matrix::from_rows(&rows).unwrap())
        })
    })
}

proptest! {
    #[test]
    fn formats_round_trip_at_single_precision(m in unit_rows()) {
        let dir = tempfile::tempdir().unwrap();
        for (name, format) in [("e.csv", Format::Csv), ("e.bin", Format::Binary)] {
            let path = dir.path().join(name);
            std::fs::write(&path, encode(&m, format)).unwrap();
            let back = read_raw(&path).unwrap();
            prop_assert_eq!(&back, &m);
            let unit = read(&path).unwrap();
            prop_assert_eq!(unit.renormalized, 0);
            for (a, b) in unit.rows.as_slice().iter().zip(m.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn binary_payload_is_exact(m in unit_rows()) {
        let bytes = encode(&m, Format::Binary);
        prop_assert_eq!(&bytes[..4], b"DPLC");
        prop_assert_eq!(bytes.len(), 12 + 4 * m.as_slice().len());
        let stored: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        for (s, x) in stored.iter().zip(m.as_slice()) {
            prop_assert_eq!(*s, *x as f32);
        }
    }
}

#[test]
fn csv_uses_shortest_round_trip_decimals() {
    let m = Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0, -0.5]]).unwrap();
    let text = String::from_utf8(encode(&m, Format::Csv)).unwrap();
    assert_eq!(text, "2,2\n0.1,0.2\n1,-0.5\n");
}

#[test]
fn off_sphere_rows_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.csv");
    std::fs::write(&p, "2,2\n3,4\n0,1\n").unwrap();
    let e = read(&p).unwrap();
    assert_eq!(e.renormalized, 1);
    assert_eq!(e.rows.row(0), &[0.6, 0.8]);
    std::fs::write(&p, "1,2\n0,0\n").unwrap();
    assert!(read(&p).is_err());
}
