use hybrid_splat::masks::{
    compute_weights, load_masks, masks_to_json, parse_masks, remove_overlapping, rle_decode, rle_encode, save_masks,
    Mask, MaskSet, WeightScheme,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_encoded_rle() {
    // 3 wide, 2 tall:
    //   . # #
    //   . # .
    // Column-major walk: (0,0) (0,1) | (1,0) (1,1) | (2,0) (2,1)
    //                     .     .       #     #       #     .
    let bits = [false, true, true, false, true, false];
    assert_eq!(rle_encode(&bits, 3, 2), vec![2, 3, 1]);
    assert_eq!(rle_decode(&[2, 3, 1], 3, 2).unwrap(), bits);
    // Leading foreground starts with an empty background run.
    let full = [true; 6];
    assert_eq!(rle_encode(&full, 3, 2), vec![0, 6]);
    assert_eq!(rle_decode(&[0, 6], 3, 2).unwrap(), full);
    assert!(rle_decode(&[2, 3], 3, 2).is_err());
}

#[test]
fn json_round_trip_and_validation() {
    let json = r#"{"height": 4, "width": 5, "masks": [
        {"id": 7, "area": 16, "rle": [0, 16, 4]},
        {"id": 9, "area": 2, "rle": [3, 2, 15]}
    ]}"#;
    let set = parse_masks("view", json, 16).unwrap();
    // The 2-pixel mask falls under the minimum area.
    assert_eq!(set.len(), 1);
    assert_eq!(set.masks[0].id, 7);
    // First four columns of a 5x4 image.
    let expect: Vec<u32> = (0..20).filter(|p| p % 5 < 4).collect();
    assert_eq!(set.masks[0].pixels, expect);
    assert_eq!(parse_masks("view", json, 1).unwrap().len(), 2);

    let bad_area = r#"{"height": 4, "width": 5, "masks": [{"id": 1, "area": 3, "rle": [3, 2, 15]}]}"#;
    assert!(parse_masks("view", bad_area, 1).is_err());
    assert!(parse_masks("view", "{not json", 1).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame_003.masks.json");
    save_masks(&set, &path).unwrap();
    let back = load_masks(&path, 16).unwrap();
    assert_eq!(back.image_id, "frame_003");
    assert_eq!(back.masks, set.masks);
    assert_eq!(parse_masks("view", &masks_to_json(&set).unwrap(), 16).unwrap().masks, set.masks);
}

fn random_blob(rng: &mut ChaCha8Rng, id: u64, w: usize, h: usize) -> Mask {
    let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
    let (rx, ry) = (rng.gen_range(2.0..12.0), rng.gen_range(2.0..12.0));
    let bits: Vec<bool> = (0..w * h)
        .map(|p| {
            let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
        })
        .collect();
    Mask::from_bits(id, &bits)
}

#[test]
fn overlap_removal_matches_quadratic_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (w, h) = (40, 30);
    for trial in 0..10 {
        let mut set = MaskSet::new("t", w, h);
        while set.len() < 20 {
            let m = random_blob(&mut rng, set.len() as u64, w, h);
            if m.area() > 0 {
                set.masks.push(m);
            }
        }
        // Nested copies guarantee that some masks must go.
        set.masks.push(Mask { id: 100, pixels: set.masks[0].pixels[..set.masks[0].area() / 2 + 1].to_vec() });
        let tau = 0.5;
        let bits: Vec<Vec<bool>> = set.masks.iter().map(|m| m.to_bits(w * h)).collect();
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(set.masks[i].area()), set.masks[i].id));
        let mut kept: Vec<usize> = Vec::new();
        for &i in &order {
            let area = bits[i].iter().filter(|&&b| b).count() as f64;
            let dominated = kept.iter().any(|&k| {
                let inter = (0..w * h).filter(|&p| bits[i][p] && bits[k][p]).count() as f64;
                inter / area > tau
            });
            if !dominated {
                kept.push(i);
            }
        }
        let want: Vec<u64> = kept.iter().map(|&i| set.masks[i].id).collect();
        let got: Vec<u64> = remove_overlapping(&set, tau).masks.iter().map(|m| m.id).collect();
        assert_eq!(got, want, "trial {trial}");
        assert!(!got.contains(&100));
    }
}

#[test]
fn weight_schemes() {
    let mut set = MaskSet::new("w", 10, 10);
    for (id, n) in [(0u64, 16u32), (1, 36), (2, 4)] {
        set.masks.push(Mask { id, pixels: (0..n).collect() });
    }
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&compute_weights(&set, WeightScheme::Uniform), &[1.0 / 3.0; 3]));
    assert!(close(&compute_weights(&set, WeightScheme::Area), &[16.0 / 56.0, 36.0 / 56.0, 4.0 / 56.0]));
    assert!(close(&compute_weights(&set, WeightScheme::SqrtArea), &[4.0 / 12.0, 6.0 / 12.0, 2.0 / 12.0]));
    assert!(compute_weights(&MaskSet::new("e", 1, 1), WeightScheme::Area).is_empty());
    assert_eq!("sqrt_area".parse::<WeightScheme>().unwrap(), WeightScheme::SqrtArea);
    assert!("cubic".parse::<WeightScheme>().is_err());
}
