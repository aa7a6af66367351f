mod common;

use psan::data::dataset::{CorpusSpec, Dataset};
use psan::data::font::glyph;
use psan::data::preprocess::preprocess;
use psan::data::render::{render_word, RenderOptions};
use psan::data::transform::Transform;
use psan::data::{pgm, Image};

/// The capital A as rows of ink, written out independently of the font
/// table.
const A: [&str; 7] = [".###.", "#...#", "#...#", "#...#", "#####", "#...#", "#...#"];

#[test]
fn font_a_matches_the_drawn_bitmap() {
    let g = glyph('A').unwrap();
    for (row, pattern) in A.iter().enumerate() {
        for (col, ch) in pattern.chars().enumerate() {
            assert_eq!(psan::data::font::ink(g, row, col), ch == '#', "row {row} col {col}");
        }
    }
}

#[test]
fn clean_render_of_a_is_pixel_exact() {
    for (seed, scale) in [(1, 2), (2, 3), (3, 4)] {
        let opts = RenderOptions { scale: Some(scale), ..RenderOptions::clean() };
        let (img, meta) = render_word("A", seed, &opts).unwrap();
        assert_eq!(meta.scale, scale);
        let m = meta.margin;
        assert_eq!((img.height, img.width), (7 * scale + 2 * m, 5 * scale + 2 * m));
        for y in 0..img.height {
            for x in 0..img.width {
                let inside = (m..m + 7 * scale).contains(&y) && (m..m + 5 * scale).contains(&x);
                let ink = inside && A[(y - m) / scale].as_bytes()[(x - m) / scale] == b'#';
                let want = if ink { meta.foreground } else { meta.background };
                for c in 0..3 {
                    assert_eq!(img.at(c, y, x), want, "scale {scale} at ({y}, {x})");
                }
            }
        }
    }
}

#[test]
fn preprocess_examples() {
    let wide = preprocess(&Image::filled(3, 64, 256, 0.5));
    assert_eq!(wide.shape(), &[3, 32, 128]);
    assert!(wide.data().iter().all(|&v| v == 0.0));

    let square = preprocess(&Image::filled(3, 32, 32, 1.0));
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..128 {
                assert_eq!(square.at(&[c, y, x]), if x < 32 { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn dataset_order_is_reproducible_and_manifest_round_trips() {
    let spec =
        CorpusSpec { alphabet: "abc123".chars().collect(), min_len: 1, max_len: 5, render: RenderOptions::default() };
    let a = Dataset::generate(&spec, 20, 9).unwrap();
    let b = Dataset::generate(&spec, 20, 9).unwrap();
    assert_eq!(a.records, b.records);
    let parsed = Dataset::parse_manifest(&a.manifest(), spec.render).unwrap();
    assert_eq!(parsed.records, a.records);
    assert_eq!(a.manifest().lines().next().unwrap().split('\t').count(), 3);
}

#[test]
fn pgm_export_round_trips_through_disk() {
    let spec = CorpusSpec { alphabet: "xy".chars().collect(), min_len: 2, max_len: 2, render: RenderOptions::clean() };
    let data = Dataset::generate(&spec, 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.export_pgm(dir.path()).unwrap();
    let (raw, _) = data.raw(2).unwrap();
    let back = pgm::read(&dir.path().join("000002.pgm")).unwrap();
    assert_eq!((back.height, back.width), (raw.height, raw.width));
    for (a, b) in back.to_gray().iter().zip(raw.to_gray()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn geometric_transform_contracts() {
    common::geometric_contracts().unwrap();
    assert_eq!(Transform::ALL.len(), 5);
}
