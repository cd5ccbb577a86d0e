//! Deterministic stand-in for a grounding model: answers every pair with its
//! own target boxes, optionally displaced.
//!
//! Each box center moves by `jitter` times the box diagonal along one of the
//! four diagonal directions, picked by a generator seeded from the run seed
//! and the pair's identity. Moving along a diagonal keeps the
//! displacement-to-diagonal ratio unchanged under per-axis scaling, so the
//! ratio set on the quantized grid is also the ratio in pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::geometry::{QuantizedBox, QUANT_MAX};
use crate::outparse::{parse, RawPredictionRecord, WireBox};
use crate::promptgen::{json_box_answer, loc_token_answer, TrainingPair, WireFormat};

fn pair_rng(seed: u64, image_id: &str, class_name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.update([0]);
    h.update(class_name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Shifts `[lo, hi]` by `delta`, reversing the direction if that leaves the
/// grid and clamping if neither direction fits.
fn shift_axis(lo: u16, hi: u16, delta: i64) -> (u16, u16) {
    let max = i64::from(QUANT_MAX);
    let (lo, hi) = (i64::from(lo), i64::from(hi));
    let fits = |d: i64| lo + d >= 0 && hi + d <= max;
    let d = if fits(delta) {
        delta
    } else if fits(-delta) {
        -delta
    } else if delta > 0 {
        max - hi
    } else {
        -lo
    };
    ((lo + d) as u16, (hi + d) as u16)
}

pub fn jitter_box(q: QuantizedBox, jitter: f64, rng: &mut impl Rng) -> QuantizedBox {
    let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    if jitter == 0.0 {
        return q;
    }
    let w = f64::from(q.qx2 - q.qx1);
    let h = f64::from(q.qy2 - q.qy1);
    let (x1, x2) = shift_axis(q.qx1, q.qx2, (sx * jitter * w).round() as i64);
    let (y1, y2) = shift_axis(q.qy1, q.qy2, (sy * jitter * h).round() as i64);
    QuantizedBox::new(x1.into(), y1.into(), x2.into(), y2.into()).expect("shift keeps order and range")
}

/// One raw prediction per pair, in the pair's wire format and order.
pub fn stub_predict(pairs: &[TrainingPair], jitter: f64, seed: u64) -> Vec<RawPredictionRecord> {
    pairs
        .iter()
        .map(|pair| {
            let boxes: Vec<QuantizedBox> = parse(&pair.answer, pair.format)
                .predictions
                .iter()
                .filter_map(|p| match p.coords {
                    WireBox::Quantized(q) => Some(q),
                    WireBox::Json(v) => {
                        let c = v.map(|x| x.round().clamp(0.0, f64::from(QUANT_MAX)) as u32);
                        QuantizedBox::new(c[0], c[1], c[2], c[3]).ok()
                    }
                })
                .collect();
            let mut rng = pair_rng(seed, &pair.image_id, &pair.class_name);
            let moved: Vec<QuantizedBox> = boxes.into_iter().map(|q| jitter_box(q, jitter, &mut rng)).collect();
            let raw_output = match pair.format {
                WireFormat::LocToken => loc_token_answer(&pair.class_name, &moved),
                WireFormat::JsonBox => json_box_answer(&pair.class_name, &moved),
            };
            RawPredictionRecord {
                image_id: pair.image_id.clone(),
                class_name: pair.class_name.clone(),
                format: pair.format,
                raw_output,
            }
        })
        .collect()
}
