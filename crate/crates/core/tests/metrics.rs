//! Evaluation metrics and ingestion against independent oracles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use savekit::backbone::AttentionRecord;
use savekit::eval::{
    flow_similarity, frame_consistency, token_attention_share, FrameEmbedder, PixelEmbedder,
};
use savekit::fixtures::MovingShape;
use savekit::pseudo_flow::DisplacementField;
use savekit::tensor::Tensor;
use savekit::text::Vocab;
use savekit::video::{ingest, write_frames, VideoFrames};

fn field(grid: (usize, usize), vectors: &[[i64; 2]]) -> DisplacementField {
    let (h, w) = grid;
    let p = h * w;
    DisplacementField {
        grid,
        frames: vectors.len() / p,
        argmax_locs: vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let k = i % p;
                [((k / w) as i64 + v[0]) as usize, ((k % w) as i64 + v[1]) as usize]
            })
            .collect(),
        distances: vectors.iter().map(|v| ((v[0] * v[0] + v[1] * v[1]) as f64).sqrt()).collect(),
        normalized: false,
    }
}

#[test]
fn rotated_flow_is_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = (9, 9);
    for _ in 0..20 {
        let frames = rng.random_range(1..5);
        // interior pixels move by at most 2 cells, the border stays put
        let vectors: Vec<[i64; 2]> = (0..frames * 81)
            .map(|i| {
                let (r, c) = ((i % 81) / 9, i % 9);
                if (2..7).contains(&r) && (2..7).contains(&c) {
                    [rng.random_range(-2..=2), rng.random_range(-2..=2)]
                } else {
                    [0, 0]
                }
            })
            .collect();
        if vectors.iter().all(|v| *v == [0, 0]) {
            continue;
        }
        let rotated: Vec<[i64; 2]> = vectors.iter().map(|v| [-v[1], v[0]]).collect();
        let (a, b) = (field(grid, &vectors), field(grid, &rotated));
        let s = flow_similarity(&a, &b).unwrap();
        assert!(s.abs() <= 1e-6, "similarity {s}");
    }
}

struct Lookup(Vec<Vec<f64>>);

impl FrameEmbedder for Lookup {
    // frame i is tagged by its constant value i / 10
    fn embed(&self, frame: &Tensor) -> savekit::error::Result<Vec<f64>> {
        Ok(self.0[(frame.data()[0] * 10.0).round() as usize].clone())
    }
}

fn constant_frames(n: usize) -> VideoFrames {
    let data: Vec<f64> = (0..n).flat_map(|i| vec![i as f64 / 10.0; 3 * 4 * 4]).collect();
    VideoFrames::new(Tensor::new(&[n, 3, 4, 4], data).unwrap()).unwrap()
}

#[test]
fn orthogonal_frames_are_inconsistent() {
    let e = Lookup(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(frame_consistency(&constant_frames(2), &e).unwrap(), 0.0);
    let same = Lookup(vec![vec![0.6, 0.8], vec![0.6, 0.8]]);
    assert!((frame_consistency(&constant_frames(2), &same).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn frame_consistency_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, side, px) = (4, 8, 32);
    let data: Vec<f64> = (0..n * 3 * px * px).map(|_| rng.random::<f64>()).collect();
    let video = VideoFrames::new(Tensor::new(&[n, 3, px, px], data.clone()).unwrap()).unwrap();
    // 4×4 block means, centered and normalized
    let embed = |f: usize| -> Vec<f64> {
        let mut v = Vec::new();
        for c in 0..3 {
            for br in 0..side {
                for bc in 0..side {
                    let mut s = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            s += data[((f * 3 + c) * px + br * 4 + dy) * px + bc * 4 + dx];
                        }
                    }
                    v.push(s / 16.0 - 0.5);
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let oracle = (0..n - 1)
        .map(|i| embed(i).iter().zip(embed(i + 1)).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / (n - 1) as f64;
    let got = frame_consistency(&video, &PixelEmbedder { side }).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn token_shares_match_direct_summation() {
    let vocab = Vocab::default();
    let prompt = vocab.tokenize("a photo of <pro> <mot>").unwrap();
    let l = prompt.len();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cross = BTreeMap::new();
    let mut grids = BTreeMap::new();
    for (block, side) in [(1usize, 4usize), (2, 2)] {
        grids.insert(block, (side, side));
        for frame in 0..3 {
            let heads = 2;
            let data: Vec<f64> = (0..heads * side * side * l).map(|_| rng.random::<f64>()).collect();
            cross.insert((block, frame), Tensor::new(&[heads, side * side, l], data).unwrap());
        }
    }
    let record = AttentionRecord { st_attn: BTreeMap::new(), cross_attn: cross.clone(), grids, frames: 3 };
    let shares = token_attention_share(&record, &prompt).unwrap();

    let mut mass = vec![0.0; l];
    for t in cross.values() {
        for (i, x) in t.data().iter().enumerate() {
            mass[i % l] += x;
        }
    }
    let total: f64 = (0..l).filter(|&k| prompt.ids[k] != 0).map(|k| mass[k]).sum();
    for k in 0..l {
        let want = if prompt.ids[k] != 0 { mass[k] / total } else { 0.0 };
        assert!((shares[k] - want).abs() < 1e-12, "position {k}: {} vs {want}", shares[k]);
    }
    assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn ingest_reads_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let video = MovingShape { frames: 32, step: 0.5, ..MovingShape::default() }.render().unwrap();
    write_frames(dir.path(), &video).unwrap();
    let back = ingest(dir.path(), video.height(), video.width()).unwrap();
    assert_eq!(back.frames(), 32);
    let err = (back.data.zip_map(&video.data, |a, b| (a - b).abs()).unwrap())
        .data()
        .iter()
        .fold(0.0f64, |m, x| m.max(*x));
    assert!(err <= 0.5 / 255.0 + 1e-12, "8-bit round trip error {err}");
}

#[test]
fn ingest_gap_names_the_missing_frame() {
    let dir = tempfile::tempdir().unwrap();
    let video = MovingShape { frames: 3, ..MovingShape::default() }.render().unwrap();
    write_frames(dir.path(), &video).unwrap();
    std::fs::remove_file(dir.path().join("frame_0002.png")).unwrap();
    let err = ingest(dir.path(), video.height(), video.width()).unwrap_err().to_string();
    assert!(err.contains("frame_0002"), "{err}");
}
