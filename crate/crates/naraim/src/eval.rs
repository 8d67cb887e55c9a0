//! Downstream evaluation: top-1 accuracy, accuracy binned by original
//! aspect ratio, and per-patch validation-MSE maps, with CSV/PGM export.

use std::fmt::Write as _;
use std::path::Path;

use crate::embed::{build_loss_mask, build_mask, AttentionSpec, Phase};
use crate::error::{Error, Result};
use crate::imaging::{
    pad_to_sequence, patchify, prepare_image, Image, PipelineConfig, ResizePolicy, TokenCoord,
};
use crate::model::{attentive_probe, backbone_forward, pretrain_head, BackboneConfig};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::ParamTree;
use crate::train::{next_patch_targets, LossMode};

/// Ratio edges splitting width/height into five bins; the outer bins are
/// (0, 1/2] and (2, inf), the middle edges symmetric in log ratio.
pub const DEFAULT_BIN_EDGES: [f64; 4] = [0.5, 0.8, 1.25, 2.0];

/// Index of the bin holding `ratio` under left-open/right-closed edges.
pub fn aspect_bin_index(edges: &[f64], ratio: f64) -> usize {
    edges
        .iter()
        .position(|&e| ratio <= e)
        .unwrap_or(edges.len())
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::config("aspect bins need at least one edge"));
    }
    if edges[0] <= 0.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "aspect bin edges must be positive and strictly increasing, got {edges:?}"
        )));
    }
    Ok(())
}

/// One evaluated sample: original (pre-resize) dims plus the decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleResult {
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub predicted: usize,
}

impl SampleResult {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }

    pub fn ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Accuracy of a whole evaluated set plus its per-sample decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub results: Vec<SampleResult>,
}

/// Sample counts and hits per aspect-ratio bin.
#[derive(Clone, Debug, PartialEq)]
pub struct AspectBinReport {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub correct: Vec<usize>,
}

impl AspectBinReport {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Accuracy within one bin; empty bins have none.
    pub fn accuracy(&self, bin: usize) -> Option<f64> {
        (self.counts[bin] > 0).then(|| self.correct[bin] as f64 / self.counts[bin] as f64)
    }
}

/// Bucket per-sample decisions by the ratio of their original dims.
pub fn aspect_bin_accuracy(edges: &[f64], results: &[SampleResult]) -> Result<AspectBinReport> {
    validate_edges(edges)?;
    let bins = edges.len() + 1;
    let mut counts = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    for r in results {
        let bin = aspect_bin_index(edges, r.ratio());
        counts[bin] += 1;
        if r.correct() {
            correct[bin] += 1;
        }
    }
    Ok(AspectBinReport {
        edges: edges.to_vec(),
        counts,
        correct,
    })
}

/// Classify one image with a frozen backbone and an attentive probe.
pub fn classify_image(
    bcfg: &BackboneConfig,
    pipe: &PipelineConfig,
    policy: ResizePolicy,
    backbone: &ParamTree,
    probe: &ParamTree,
    img: &Image,
) -> Result<usize> {
    // Eval preprocessing draws nothing from the generator.
    let mut rng = Rng::seed_from_u64(0);
    let prepared = prepare_image(img, pipe, policy, false, &mut rng)?;
    let grid = patchify(&prepared, pipe)?;
    let seq = pad_to_sequence(&grid, pipe)?;
    let spec = AttentionSpec {
        prefix_n: None,
        pad_mask: seq.pad_mask.clone(),
    };
    let visible = build_mask(&spec, Phase::Finetune);
    let mut tape = Tape::new();
    let mut vars = tape.register(backbone);
    vars.extend(tape.register(probe));
    let feats = backbone_forward(&mut tape, &vars, bcfg, &seq, &visible)?;
    let logits = attentive_probe(&mut tape, &vars, bcfg, feats, &seq.pad_mask)?;
    let row = tape.value(logits).data();
    Ok(row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap())
}

/// Top-1 accuracy under the policy's eval preprocessing. Parameters are
/// read-only; the per-sample decisions come back for further slicing.
pub fn evaluate_accuracy(
    bcfg: &BackboneConfig,
    pipe: &PipelineConfig,
    policy: ResizePolicy,
    backbone: &ParamTree,
    probe: &ParamTree,
    images: &[Image],
    labels: &[usize],
) -> Result<EvalOutcome> {
    if images.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if labels.len() != images.len() {
        return Err(Error::contract(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let mut results = Vec::with_capacity(images.len());
    for (img, &label) in images.iter().zip(labels) {
        let predicted = classify_image(bcfg, pipe, policy, backbone, probe, img)?;
        results.push(SampleResult {
            height: img.height(),
            width: img.width(),
            label,
            predicted,
        });
    }
    let hits = results.iter().filter(|r| r.correct()).count();
    Ok(EvalOutcome {
        accuracy: hits as f64 / results.len() as f64,
        results,
    })
}

pub const MAP_BINS: usize = 16;

/// How a predicted patch lands in the MSE map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapBinning {
    /// Grid position used as-is (fixed square grids).
    Direct,
    /// Row and column fractions each discretized into 16 bins.
    Fractional,
    /// Raster index mapped to [0, 1) and discretized into 16 bins (1x16).
    FractionalIndex,
}

/// Mean squared error and sample count per map cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMseMap {
    rows: usize,
    cols: usize,
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl PatchMseMap {
    pub fn new(rows: usize, cols: usize) -> Self {
        PatchMseMap {
            rows,
            cols,
            sum: vec![0.0; rows * cols],
            count: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn add(&mut self, row: usize, col: usize, err: f64) {
        self.sum[row * self.cols + col] += err;
        self.count[row * self.cols + col] += 1;
    }

    pub fn count(&self, row: usize, col: usize) -> usize {
        self.count[row * self.cols + col]
    }

    pub fn mean(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.cols + col;
        (self.count[i] > 0).then(|| self.sum[i] / self.count[i] as f64)
    }

    pub fn total_count(&self) -> usize {
        self.count.iter().sum()
    }

    /// Count-weighted mean over all cells.
    pub fn grand_mean(&self) -> Option<f64> {
        let n = self.total_count();
        (n > 0).then(|| self.sum.iter().sum::<f64>() / n as f64)
    }
}

fn map_cell(
    binning: MapBinning,
    coord: TokenCoord,
    index: usize,
    real: usize,
) -> Result<(usize, usize)> {
    let frac = |pos: usize, extent: usize| (pos * MAP_BINS / extent).min(MAP_BINS - 1);
    match binning {
        MapBinning::Direct => {
            if coord.row >= MAP_BINS || coord.col >= MAP_BINS {
                return Err(Error::contract(format!(
                    "direct binning needs a grid within {MAP_BINS}x{MAP_BINS}, got {}x{}",
                    coord.grid_h, coord.grid_w
                )));
            }
            Ok((coord.row, coord.col))
        }
        MapBinning::Fractional => Ok((frac(coord.row, coord.grid_h), frac(coord.col, coord.grid_w))),
        MapBinning::FractionalIndex => Ok((0, frac(index, real))),
    }
}

/// Validation MSE per map cell under causal masking, plus the overall MSE.
/// Each scored position's error lands in the cell of the patch it predicts,
/// so the first patch of every image is never counted.
#[allow(clippy::too_many_arguments)]
pub fn per_patch_mse_map(
    bcfg: &BackboneConfig,
    pipe: &PipelineConfig,
    policy: ResizePolicy,
    params: &ParamTree,
    images: &[Image],
    binning: MapBinning,
    loss_mode: LossMode,
) -> Result<(PatchMseMap, f64)> {
    if images.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let (rows, cols) = match binning {
        MapBinning::FractionalIndex => (1, MAP_BINS),
        _ => (MAP_BINS, MAP_BINS),
    };
    let mut map = PatchMseMap::new(rows, cols);
    let mut total = 0.0;
    let mut scored = 0usize;
    for img in images {
        let mut rng = Rng::seed_from_u64(0);
        let prepared = prepare_image(img, pipe, policy, false, &mut rng)?;
        let grid = patchify(&prepared, pipe)?;
        let seq = pad_to_sequence(&grid, pipe)?;
        let real = seq.real_count();
        if real < 2 {
            continue;
        }
        let spec = AttentionSpec {
            prefix_n: Some(1),
            pad_mask: seq.pad_mask.clone(),
        };
        let visible = build_mask(&spec, Phase::Pretrain);
        let loss_mask = build_loss_mask(&spec, Phase::Pretrain);
        let targets = next_patch_targets(&seq, &loss_mask, loss_mode)?;

        let mut tape = Tape::new();
        let vars = tape.register(params);
        let feats = backbone_forward(&mut tape, &vars, bcfg, &seq, &visible)?;
        let preds = pretrain_head(&mut tape, &vars, feats)?;
        let pv = tape.value(preds);
        let pd = pv.dims()[1];
        for (i, &keep) in loss_mask.iter().enumerate() {
            if !keep {
                continue;
            }
            let err = (0..pd)
                .map(|j| {
                    let d = pv.data()[i * pd + j] - targets.data()[i * pd + j];
                    d * d
                })
                .sum::<f64>()
                / pd as f64;
            // Position i predicts patch i + 1; bin by the predicted patch.
            let (r, c) = map_cell(binning, seq.coords[i + 1], i + 1, real)?;
            map.add(r, c, err);
            total += err;
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::contract(
            "no image in the dataset yields a scored position",
        ));
    }
    Ok((map, total / scored as f64))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.9e}")
    }
}

/// Aspect-bin report as CSV: one row per bin with its edges and accuracy.
pub fn write_bins_csv(report: &AspectBinReport, path: &Path) -> Result<()> {
    let mut out = String::from("bin_low,bin_high,count,correct,accuracy\n");
    for bin in 0..report.bins() {
        let low = if bin == 0 { 0.0 } else { report.edges[bin - 1] };
        let high = report.edges.get(bin).copied().unwrap_or(f64::INFINITY);
        let acc = report.accuracy(bin).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(low),
            fmt_f64(high),
            report.counts[bin],
            report.correct[bin],
            fmt_f64(acc)
        );
    }
    write_file(path, out.as_bytes())
}

/// MSE map as CSV: one row per cell; empty cells carry nan.
pub fn write_map_csv(map: &PatchMseMap, path: &Path) -> Result<()> {
    let mut out = String::from("row,col,count,mse\n");
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let mse = map.mean(r, c).unwrap_or(f64::NAN);
            let _ = writeln!(out, "{},{},{},{}", r, c, map.count(r, c), fmt_f64(mse));
        }
    }
    write_file(path, out.as_bytes())
}

/// MSE map as a binary graymap (P5): scored cells min-max scaled to 0..255,
/// empty cells white, matching the usual rendering of never-predicted
/// positions.
pub fn write_map_pgm(map: &PatchMseMap, path: &Path) -> Result<()> {
    let scored: Vec<f64> = (0..map.rows())
        .flat_map(|r| (0..map.cols()).filter_map(move |c| map.mean(r, c)))
        .collect();
    let lo = scored.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scored.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", map.cols(), map.rows()).into_bytes();
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let v = match map.mean(r, c) {
                None => 255u8,
                Some(x) if hi > lo => ((x - lo) / (hi - lo) * 255.0).round() as u8,
                Some(_) => 0u8,
            };
            bytes.push(v);
        }
    }
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedMode;
    use crate::model;
    use crate::rng::stream;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_hidden: 32,
            patch_size: 4,
            embed_mode: EmbedMode::Fractional,
            frac_gelu: false,
        }
    }

    fn tiny_pipeline() -> PipelineConfig {
        PipelineConfig::new(256, 4).unwrap()
    }

    fn ramp_image(h: usize, w: usize, phase: f64) -> Image {
        let mut px = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let t = (r * w + c) as f64 / (h * w) as f64;
                px.push((t + phase).fract());
                px.push((0.7 * t + 2.0 * phase).fract());
                px.push(1.0 - t);
            }
        }
        Image::new(h, w, px).unwrap()
    }

    fn tiny_models(seed: u64, classes: usize) -> (ParamTree, ParamTree) {
        let mut rng = Rng::derive(seed, &[stream::INIT]);
        let backbone = model::init_backbone_params(&tiny_backbone(), &mut rng).unwrap();
        let probe = model::init_probe_params(&tiny_backbone(), classes, &mut rng);
        (backbone, probe)
    }

    #[test]
    fn bin_index_follows_left_open_right_closed_edges() {
        let e = DEFAULT_BIN_EDGES;
        assert_eq!(aspect_bin_index(&e, 0.01), 0);
        assert_eq!(aspect_bin_index(&e, 0.5), 0);
        assert_eq!(aspect_bin_index(&e, 0.51), 1);
        assert_eq!(aspect_bin_index(&e, 0.8), 1);
        assert_eq!(aspect_bin_index(&e, 1.0), 2);
        assert_eq!(aspect_bin_index(&e, 1.25), 2);
        assert_eq!(aspect_bin_index(&e, 2.0), 3);
        assert_eq!(aspect_bin_index(&e, 2.001), 4);
        assert_eq!(aspect_bin_index(&e, 40.0), 4);
    }

    #[test]
    fn bins_partition_every_sample() {
        let mut rng = Rng::seed_from_u64(42);
        let results: Vec<SampleResult> = (0..500)
            .map(|_| SampleResult {
                height: 1 + rng.below(400),
                width: 1 + rng.below(400),
                label: rng.below(3),
                predicted: rng.below(3),
            })
            .collect();
        let report = aspect_bin_accuracy(&DEFAULT_BIN_EDGES, &results).unwrap();
        assert_eq!(report.total(), 500);
        let hits: usize = report.correct.iter().sum();
        assert_eq!(hits, results.iter().filter(|r| r.correct()).count());
    }

    #[test]
    fn bad_edges_are_rejected() {
        let results: [SampleResult; 0] = [];
        assert!(matches!(
            aspect_bin_accuracy(&[0.5, 0.5], &results),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aspect_bin_accuracy(&[-1.0, 2.0], &results),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aspect_bin_accuracy(&[], &results),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn accuracy_matches_per_sample_decisions() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let (backbone, probe) = tiny_models(3, 2);
        let images = vec![
            ramp_image(24, 20, 0.0),
            ramp_image(16, 36, 0.3),
            ramp_image(30, 18, 0.6),
            ramp_image(20, 20, 0.9),
        ];
        let labels = vec![0, 1, 1, 0];
        let outcome = evaluate_accuracy(
            &bcfg,
            &pipe,
            ResizePolicy::Native,
            &backbone,
            &probe,
            &images,
            &labels,
        )
        .unwrap();
        let mut hits = 0;
        for (img, &label) in images.iter().zip(&labels) {
            let p =
                classify_image(&bcfg, &pipe, ResizePolicy::Native, &backbone, &probe, img)
                    .unwrap();
            if p == label {
                hits += 1;
            }
        }
        assert!((outcome.accuracy - hits as f64 / 4.0).abs() < 1e-15);
        assert_eq!(outcome.results.len(), 4);
        assert_eq!(outcome.results[1].width, 36);
    }

    #[test]
    fn random_labels_score_near_chance() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let (backbone, probe) = tiny_models(9, 2);
        let mut rng = Rng::seed_from_u64(77);
        let images: Vec<Image> = (0..40)
            .map(|i| ramp_image(12 + (i % 5) * 4, 12 + (i % 7) * 3, i as f64 * 0.11))
            .collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.below(2)).collect();
        let outcome = evaluate_accuracy(
            &bcfg,
            &pipe,
            ResizePolicy::Native,
            &backbone,
            &probe,
            &images,
            &labels,
        )
        .unwrap();
        // Labels are independent of everything, so hits ~ Binomial(40, 1/2);
        // three sigmas around the mean.
        let sigma = (0.25f64 / 40.0).sqrt();
        assert!((outcome.accuracy - 0.5).abs() <= 3.0 * sigma + 1e-12);
    }

    #[test]
    fn accuracy_is_order_invariant() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let (backbone, probe) = tiny_models(5, 3);
        let images = vec![
            ramp_image(18, 26, 0.1),
            ramp_image(26, 18, 0.5),
            ramp_image(22, 22, 0.8),
        ];
        let labels = vec![2, 0, 1];
        let a = evaluate_accuracy(
            &bcfg,
            &pipe,
            ResizePolicy::Square,
            &backbone,
            &probe,
            &images,
            &labels,
        )
        .unwrap();
        let perm = [2usize, 0, 1];
        let images_p: Vec<Image> = perm.iter().map(|&i| images[i].clone()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = evaluate_accuracy(
            &bcfg,
            &pipe,
            ResizePolicy::Square,
            &backbone,
            &probe,
            &images_p,
            &labels_p,
        )
        .unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let (backbone, probe) = tiny_models(1, 2);
        assert!(matches!(
            evaluate_accuracy(
                &bcfg,
                &pipe,
                ResizePolicy::Native,
                &backbone,
                &probe,
                &[],
                &[]
            ),
            Err(Error::Contract(_))
        ));
    }

    fn pretrain_params(seed: u64) -> ParamTree {
        let mut rng = Rng::derive(seed, &[stream::INIT]);
        model::init_pretrain_params(&tiny_backbone(), &mut rng).unwrap()
    }

    #[test]
    fn direct_map_never_counts_the_first_patch() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let params = pretrain_params(21);
        let images = vec![ramp_image(40, 40, 0.2), ramp_image(36, 44, 0.6)];
        let (map, overall) = per_patch_mse_map(
            &bcfg,
            &pipe,
            ResizePolicy::Square,
            &params,
            &images,
            MapBinning::Direct,
            LossMode::Normalized,
        )
        .unwrap();
        assert_eq!(map.count(0, 0), 0);
        assert!(overall.is_finite());
        // Square policy gives every image the same grid; all patches but the
        // first are predicted exactly once per image.
        assert_eq!(map.total_count(), 2 * 15);
        assert!((map.grand_mean().unwrap() - overall).abs() <= 1e-9);
    }

    #[test]
    fn fractional_map_accounts_for_every_scored_position() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let params = pretrain_params(22);
        let images = vec![
            ramp_image(24, 20, 0.0),
            ramp_image(16, 36, 0.3),
            ramp_image(30, 18, 0.7),
        ];
        let (map, overall) = per_patch_mse_map(
            &bcfg,
            &pipe,
            ResizePolicy::Native,
            &params,
            &images,
            MapBinning::Fractional,
            LossMode::Normalized,
        )
        .unwrap();
        // Each image scores real - 1 positions.
        let mut expect = 0usize;
        for img in &images {
            let mut rng = Rng::seed_from_u64(0);
            let prepared =
                prepare_image(img, &pipe, ResizePolicy::Native, false, &mut rng).unwrap();
            let grid = patchify(&prepared, &pipe).unwrap();
            expect += grid.grid_h * grid.grid_w - 1;
        }
        assert_eq!(map.total_count(), expect);
        assert!((map.grand_mean().unwrap() - overall).abs() <= 1e-9);
    }

    #[test]
    fn index_binning_reaches_the_first_bin_on_long_sequences() {
        let bcfg = tiny_backbone();
        // A budget of 64 tokens lets a wide image keep more than 16 real
        // patches, so the second patch's index fraction drops below 1/16.
        let pipe = PipelineConfig::new(1024, 4).unwrap();
        let params = pretrain_params(23);
        let images = vec![ramp_image(20, 60, 0.4)];
        let (map, _) = per_patch_mse_map(
            &bcfg,
            &pipe,
            ResizePolicy::Native,
            &params,
            &images,
            MapBinning::FractionalIndex,
            LossMode::Normalized,
        )
        .unwrap();
        assert_eq!(map.rows(), 1);
        assert_eq!(map.cols(), 16);
        assert!(map.count(0, 0) > 0, "second patch should land in bin 0");
    }

    #[test]
    fn constant_black_images_with_raw_loss_give_a_small_map() {
        let bcfg = tiny_backbone();
        let pipe = tiny_pipeline();
        let params = pretrain_params(24);
        let images = vec![Image::new(20, 24, vec![0.0; 20 * 24 * 3]).unwrap()];
        let (map, overall) = per_patch_mse_map(
            &bcfg,
            &pipe,
            ResizePolicy::Native,
            &params,
            &images,
            MapBinning::Fractional,
            LossMode::Raw,
        )
        .unwrap();
        // Zero targets and a freshly initialized (small-weight) model keep
        // every scored cell near zero.
        assert!(overall < 1e-2);
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                if let Some(m) = map.mean(r, c) {
                    assert!(m < 1e-2);
                }
            }
        }
    }

    #[test]
    fn map_rejects_grids_wider_than_direct_bins() {
        let err = map_cell(
            MapBinning::Direct,
            TokenCoord {
                row: 0,
                col: 16,
                grid_h: 2,
                grid_w: 20,
            },
            1,
            40,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn exports_are_deterministic_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let report = AspectBinReport {
            edges: DEFAULT_BIN_EDGES.to_vec(),
            counts: vec![3, 0, 10, 4, 1],
            correct: vec![2, 0, 7, 4, 0],
        };
        let bins_path = dir.path().join("bins.csv");
        write_bins_csv(&report, &bins_path).unwrap();
        let first = std::fs::read(&bins_path).unwrap();
        write_bins_csv(&report, &bins_path).unwrap();
        assert_eq!(first, std::fs::read(&bins_path).unwrap());

        let text = String::from_utf8(first).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "bin_low,bin_high,count,correct,accuracy");
        // Row for the last bin carries an infinite upper edge.
        assert!(lines[5].contains(",inf,"));
        // Re-parsed accuracy matches at nine significant digits.
        let fields: Vec<&str> = lines[3].split(',').collect();
        let acc: f64 = fields[4].parse().unwrap();
        assert!((acc - 0.7).abs() < 1e-9);

        let mut map = PatchMseMap::new(16, 16);
        map.add(0, 1, 0.25);
        map.add(0, 1, 0.35);
        map.add(5, 9, 1.5);
        let map_path = dir.path().join("map.csv");
        write_map_csv(&map, &map_path).unwrap();
        let csv = String::from_utf8(std::fs::read(&map_path).unwrap()).unwrap();
        let mut rows = csv.lines();
        assert_eq!(rows.next().unwrap(), "row,col,count,mse");
        assert_eq!(csv.lines().count(), 257);
        let cell: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(cell[..3], ["0", "1", "2"]);
        let parsed: f64 = cell[3].parse().unwrap();
        assert!((parsed - 0.3).abs() / 0.3 < 1e-9);
        // Empty cells re-parse as NaN.
        let empty: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert!(empty[3].parse::<f64>().unwrap().is_nan());

        let pgm_path = dir.path().join("map.pgm");
        write_map_pgm(&map, &pgm_path).unwrap();
        let pgm = std::fs::read(&pgm_path).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
        let pixels = &pgm[b"P5\n16 16\n255\n".len()..];
        assert_eq!(pixels[1], 0); // cell (0,1) holds the minimum
        assert_eq!(pixels[5 * 16 + 9], 255); // cell (5,9) holds the maximum
        assert_eq!(pixels[0], 255); // empty cells render white
        write_map_pgm(&map, &pgm_path).unwrap();
        assert_eq!(pgm, std::fs::read(&pgm_path).unwrap());
    }
}
