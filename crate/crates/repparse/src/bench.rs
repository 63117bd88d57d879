//! Latency of the generated-kernel head against a simulated RoI mask head
//! as the number of detected persons grows.
//!
//! Both paths share the same image-level pass (backbone, pyramid, dense
//! head). The generated-kernel path then parses `n` candidates. The RoI path
//! crops `n` 32×32 windows from P3 and runs eight 3×3 convolutions plus a
//! 1×1 predictor on each, forward only, at the pyramid width.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use repparse_core::detect::{decode_candidates, DenseOutputs, InstanceCandidate};
use repparse_core::repparse::{encode, parse_candidates, HeadParams, ParseFlags};
use repparse_core::tensor::{bilinear_sample, conv2d};
use repparse_core::{DecodeConfig, ModelConfig, ParamStore, Tape, Tensor};

use crate::error::{Error, Result};

pub const COUNTS: [usize; 5] = [1, 2, 4, 8, 16];
pub const ROI_SIZE: usize = 32;
pub const ROI_LAYERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub head_ms: f64,
    pub roi_ms: f64,
}

pub struct RoiHead {
    convs: Vec<(Tensor, Tensor)>,
    predictor: (Tensor, Tensor),
}

impl RoiHead {
    pub fn new(channels: usize, parts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (9 * channels) as f64).sqrt();
        let convs = (0..ROI_LAYERS)
            .map(|_| {
                let w = Tensor::from_fn(&[channels, channels, 3, 3], |_| std * rng.sample::<f64, _>(StandardNormal));
                (w, Tensor::zeros(&[channels]))
            })
            .collect();
        let pw = Tensor::from_fn(&[parts, channels, 1, 1], |_| rng.sample::<f64, _>(StandardNormal) / (channels as f64).sqrt());
        RoiHead { convs, predictor: (pw, Tensor::zeros(&[parts])) }
    }

    /// Mask logits `[C, 32, 32]` for the window of side `extent` pixels centred at `center`.
    pub fn forward(&self, p3: &Tensor, stride: f64, center: (f64, f64), extent: f64) -> Result<Tensor> {
        let step = extent / ROI_SIZE as f64;
        let mut pts = Vec::with_capacity(ROI_SIZE * ROI_SIZE);
        for j in 0..ROI_SIZE {
            for i in 0..ROI_SIZE {
                let x = center.0 - extent / 2.0 + (i as f64 + 0.5) * step;
                let y = center.1 - extent / 2.0 + (j as f64 + 0.5) * step;
                pts.push((x / stride - 0.5, y / stride - 0.5));
            }
        }
        let sampled = bilinear_sample(p3, &pts)?;
        let d = p3.shape()[0];
        let mut x = Tensor::from_fn(&[d, ROI_SIZE, ROI_SIZE], |i| sampled.data()[(i % (ROI_SIZE * ROI_SIZE)) * d + i / (ROI_SIZE * ROI_SIZE)]);
        for (w, b) in &self.convs {
            x = conv2d(&x, w, Some(b), 1, 1)?;
            for v in x.data_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(conv2d(&x, &self.predictor.0, Some(&self.predictor.1), 1, 0)?)
    }
}

/// `n` candidates spread over the image with random part offsets.
pub fn synthetic_candidates(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<InstanceCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    (0..n)
        .map(|i| {
            let x = rng.random_range(0.2 * w..0.8 * w);
            let y = rng.random_range(0.2 * h..0.8 * h);
            InstanceCandidate {
                level: 3,
                index: i,
                location: (x, y),
                score: 1.0 - i as f64 / (n + 1) as f64,
                bbox: [x - 20.0, y - 30.0, x + 20.0, y + 30.0],
                part_offsets: (0..cfg.parts).map(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))).collect(),
            }
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Image-level pass shared by both heads, decoding included.
fn shared_pass(params: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<(Tape, repparse_core::repparse::Encoded, HeadParams)> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let enc = encode(&mut tape, &b, cfg, img)?;
    let dense = DenseOutputs::from_tape(&tape, &enc.dense);
    let _ = decode_candidates(&dense, &DecodeConfig::default());
    let hp = HeadParams::from_bound(&b, cfg);
    Ok((tape, enc, hp))
}

pub fn time_head(params: &ParamStore, cfg: &ModelConfig, image: &Tensor, cands: &[InstanceCandidate]) -> Result<f64> {
    let t0 = Instant::now();
    let (mut tape, enc, hp) = shared_pass(params, cfg, image)?;
    let out = parse_candidates(&mut tape, &hp, &enc, cands, cfg, ParseFlags::FULL)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(out);
    Ok(ms)
}

pub fn time_roi(params: &ParamStore, cfg: &ModelConfig, image: &Tensor, cands: &[InstanceCandidate], roi: &RoiHead) -> Result<f64> {
    let t0 = Instant::now();
    let (tape, enc, _) = shared_pass(params, cfg, image)?;
    let p3 = tape.value(enc.pyramid.levels[0]);
    let stride = ModelConfig::STRIDES[0] as f64;
    let mut outs = Vec::with_capacity(cands.len());
    for c in cands {
        let extent = (c.bbox[2] - c.bbox[0]).max(c.bbox[3] - c.bbox[1]);
        outs.push(roi.forward(p3, stride, c.location, extent)?);
    }
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(outs);
    Ok(ms)
}

/// Median wall-clock over `repeats` runs for every `n` in `counts`.
/// Runs on the calling thread only.
pub fn run_bench(params: &ParamStore, cfg: &ModelConfig, image: &Tensor, counts: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Usage("--repeats must be at least 1".into()));
    }
    let roi = RoiHead::new(cfg.pyramid_dim, cfg.parts, seed);
    // Warm caches and allocator once.
    let warm = synthetic_candidates(1, cfg, seed);
    time_head(params, cfg, image, &warm)?;
    time_roi(params, cfg, image, &warm, &roi)?;
    let cands: Vec<Vec<InstanceCandidate>> = counts.iter().map(|&n| synthetic_candidates(n, cfg, seed)).collect();
    let mut head = vec![Vec::with_capacity(repeats); counts.len()];
    let mut rois = vec![Vec::with_capacity(repeats); counts.len()];
    // Counts interleaved within each repeat.
    for _ in 0..repeats {
        for (i, c) in cands.iter().enumerate() {
            head[i].push(time_head(params, cfg, image, c)?);
            rois[i].push(time_roi(params, cfg, image, c, &roi)?);
        }
    }
    Ok(counts
        .iter()
        .zip(head.into_iter().zip(rois))
        .map(|(&n, (h, r))| BenchRow { n, head_ms: median(h), roi_ms: median(r) })
        .collect())
}

/// CSV with the repeat count in a leading comment line.
pub fn write_csv(mut w: impl Write, rows: &[BenchRow], repeats: usize) -> std::io::Result<()> {
    writeln!(w, "# median of {repeats} repeats")?;
    writeln!(w, "n,head_ms,roi_ms")?;
    for r in rows {
        writeln!(w, "{},{:.4},{:.4}", r.n, r.head_ms, r.roi_ms)?;
    }
    Ok(())
}

/// Parses [`write_csv`] output back, returning the repeat count and rows.
pub fn read_csv(text: &str) -> Option<(usize, Vec<BenchRow>)> {
    let mut lines = text.lines();
    let repeats = lines.next()?.strip_prefix("# median of ")?.strip_suffix(" repeats")?.parse().ok()?;
    if lines.next()? != "n,head_ms,roi_ms" {
        return None;
    }
    let rows = lines
        .map(|l| {
            let mut it = l.split(',');
            let row = BenchRow { n: it.next()?.parse().ok()?, head_ms: it.next()?.parse().ok()?, roi_ms: it.next()?.parse().ok()? };
            it.next().is_none().then_some(row)
        })
        .collect::<Option<Vec<_>>>()?;
    Some((repeats, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![BenchRow { n: 1, head_ms: 1.5, roi_ms: 2.25 }, BenchRow { n: 2, head_ms: 1.75, roi_ms: 4.5 }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows, 20).unwrap();
        assert_eq!(read_csv(std::str::from_utf8(&buf).unwrap()), Some((20, rows)));
    }

    #[test]
    fn roi_output_shape() {
        let cfg = ModelConfig::default();
        let roi = RoiHead::new(4, cfg.parts, 0);
        let p3 = Tensor::from_fn(&[4, 16, 16], |i| (i % 7) as f64);
        let out = roi.forward(&p3, 8.0, (64.0, 64.0), 60.0).unwrap();
        assert_eq!(out.shape(), &[cfg.parts, ROI_SIZE, ROI_SIZE]);
    }
}
