//! Pairwise metric tables, the α sweep and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manipulator::{sample_region, tamper, ManipulatorHandle, ManipulatorKind, TamperRegion, DEFAULT_REGION_SIZE};
use crate::metrics::{format_value, heatmap, roi_metrics, to_metric_scale, write_heatmap_png, Metric, MetricConfig, MetricReport, MetricValues, Scope};
use crate::trainer::{fit, load_checkpoint, parse_kv_lines, protect_pixels, Checkpoint, TrainingConfig};
use crate::volume::{split_dataset, SliceCache};

pub const REAL_VS_PROTECTED: &str = "real_vs_protected";
pub const REAL_VS_PROTECTED_TAMPERED: &str = "real_vs_protected_tampered";
pub const REAL_VS_UNPROTECTED_TAMPERED: &str = "real_vs_unprotected_tampered";
pub const PAIRS: [&str; 3] = [REAL_VS_PROTECTED, REAL_VS_PROTECTED_TAMPERED, REAL_VS_UNPROTECTED_TAMPERED];

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const TABLE_HEADER: &str = "Metric,MITS-GAN,TAFIM,MITS-GAN T.,TAFIM T.,Unprotected T.";
pub const ABLATION_HEADER: &str = "alpha,RMSE,PSNR,LPIPS,SSIM";
pub const TABLE_FOOTER: &str = "# intensities on a 12-bit scale (HU + 1024, MAX_I = 4095); this scale is an assumption\n# TAFIM columns are reserved and not computed\n";

/// How test slices are tampered and scored.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub regions_per_slice: usize,
    pub region_seed: u64,
    pub region_size: usize,
    pub scopes: Vec<Scope>,
    /// Heatmaps are produced for the first `heatmap_samples` test slices.
    pub heatmap_samples: usize,
    pub metrics: MetricConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            regions_per_slice: 1,
            region_seed: 0,
            region_size: DEFAULT_REGION_SIZE,
            scopes: vec![Scope::WholeImage, Scope::TamperSquare],
            heatmap_samples: 4,
            metrics: MetricConfig::default(),
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.regions_per_slice == 0 {
            return Err(Error::Config("regions_per_slice must be at least 1".into()));
        }
        if self.scopes.is_empty() {
            return Err(Error::Config("at least one scope is required".into()));
        }
        self.metrics.validate()
    }

    /// Tamper squares for test slice `index`; a pure function of the seed and index.
    pub fn regions_for(&self, index: usize, h: usize, w: usize) -> Result<Vec<TamperRegion>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.region_seed);
        rng.set_stream(index as u64);
        (0..self.regions_per_slice)
            .map(|_| sample_region(h, w, self.region_size, &mut rng))
            .collect()
    }
}

/// Metrics of the three pairs for one (slice, square) sample, in [`PAIRS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub slice: usize,
    pub region: TamperRegion,
    pub whole: Option<[MetricValues; 3]>,
    pub square: Option<[MetricValues; 3]>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub samples: Vec<PairSample>,
    pub reports: Vec<MetricReport>,
    /// `(file stem, |a − b|)` for the sampled slices.
    pub heatmaps: Vec<(String, Array2<f64>)>,
}

impl Evaluation {
    pub fn report(&self, scope: Scope) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.scope == scope)
    }
}

fn aggregate(samples: &[PairSample], scope: Scope) -> Result<MetricReport> {
    let mut report = MetricReport::new(scope);
    for (k, pair) in PAIRS.iter().enumerate() {
        let values: Vec<MetricValues> = samples
            .iter()
            .filter_map(|s| match scope {
                Scope::WholeImage => s.whole.map(|v| v[k]),
                Scope::TamperSquare => s.square.map(|v| v[k]),
            })
            .collect();
        report.push(*pair, MetricValues::mean(&values)?);
    }
    Ok(report)
}

/// Protects, tampers and scores every test slice (normalized pixels).
pub fn evaluate_slices(slices: &[Array2<f64>], ckpt: &Checkpoint, m: &ManipulatorHandle, opts: &EvalOptions) -> Result<Evaluation> {
    opts.validate()?;
    if slices.is_empty() {
        return Err(Error::Invalid("no test slices to evaluate".into()));
    }
    let cfg = &opts.metrics;
    let mut samples = Vec::new();
    let mut heatmaps = Vec::new();
    for (i, x) in slices.iter().enumerate() {
        let (h, w) = x.dim();
        let xp = protect_pixels(x, ckpt)?;
        let (xs, xps) = (to_metric_scale(x.view()), to_metric_scale(xp.view()));
        if i < opts.heatmap_samples {
            heatmaps.push((format!("slice_{i:04}_protected"), heatmap(xs.view(), xps.view())?));
        }
        for region in opts.regions_for(i, h, w)? {
            let tp = to_metric_scale(tamper(xp.view(), region, m)?.view());
            let tu = to_metric_scale(tamper(x.view(), region, m)?.view());
            let others = [&xps, &tp, &tu];
            let mut sample = PairSample {
                slice: i,
                region,
                whole: None,
                square: None,
            };
            for scope in &opts.scopes {
                let mut vals = Vec::with_capacity(3);
                for b in others {
                    vals.push(match scope {
                        Scope::WholeImage => MetricValues::compute(xs.view(), b.view(), cfg)?,
                        Scope::TamperSquare => roi_metrics(xs.view(), b.view(), region, cfg)?,
                    });
                }
                let arr = [vals[0], vals[1], vals[2]];
                match scope {
                    Scope::WholeImage => sample.whole = Some(arr),
                    Scope::TamperSquare => sample.square = Some(arr),
                }
            }
            samples.push(sample);
        }
    }
    let reports = opts
        .scopes
        .iter()
        .map(|&s| aggregate(&samples, s))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        samples,
        reports,
        heatmaps,
    })
}

/// A file-backed evaluation: slice cache, test split and checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationPlan {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Explicit test volumes; when empty the split below is recomputed.
    pub test_ids: Vec<String>,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Manipulator used for tampering; `None` reuses the checkpoint's.
    pub manipulator_kind: Option<ManipulatorKind>,
    pub manipulator_weights: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub options: EvalOptions,
}

impl EvaluationPlan {
    pub fn new(data_dir: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        EvaluationPlan {
            data_dir: data_dir.into(),
            checkpoint: checkpoint.into(),
            test_ids: Vec::new(),
            split_ratio: 0.8,
            split_seed: 0,
            manipulator_kind: None,
            manipulator_weights: None,
            output_dir: output_dir.into(),
            options: EvalOptions::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = || Error::Config(format!("`{key}`: cannot parse `{value}`"));
        let o = &mut self.options;
        match key {
            "data_dir" => self.data_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "output_dir" => self.output_dir = value.into(),
            "test_ids" => {
                self.test_ids = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "split_ratio" => self.split_ratio = value.parse().map_err(|_| parse_err())?,
            "split_seed" => self.split_seed = value.parse().map_err(|_| parse_err())?,
            "manipulator_kind" => {
                self.manipulator_kind = match value {
                    "checkpoint" | "" => None,
                    v => Some(v.parse().map_err(|e: Error| Error::Config(e.to_string()))?),
                }
            }
            "manipulator_weights" => self.manipulator_weights = (!value.is_empty() && value != "none").then(|| value.into()),
            "regions_per_slice" => o.regions_per_slice = value.parse().map_err(|_| parse_err())?,
            "region_seed" => o.region_seed = value.parse().map_err(|_| parse_err())?,
            "region_size" => o.region_size = value.parse().map_err(|_| parse_err())?,
            "heatmap_samples" => o.heatmap_samples = value.parse().map_err(|_| parse_err())?,
            "max_intensity" => o.metrics.max_intensity = value.parse().map_err(|_| parse_err())?,
            "scopes" => {
                o.scopes = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "whole_image" => Ok(Scope::WholeImage),
                        "tamper_square" => Ok(Scope::TamperSquare),
                        other => Err(Error::Config(format!("unknown scope `{other}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "lpips_backbone" => {
                o.metrics.lpips_backbone = match value {
                    "fixed_random" => crate::metrics::LpipsBackbone::FixedRandom,
                    "squeeze_pretrained" => crate::metrics::LpipsBackbone::SqueezePretrained,
                    other => return Err(Error::Config(format!("unknown lpips backbone `{other}`"))),
                }
            }
            other => return Err(Error::Config(format!("unknown plan key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of `EvaluationPlan::new("", "", "")`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut plan = EvaluationPlan::new("", "", "evaluation");
        for (k, v) in parse_kv_lines(text)? {
            plan.set(&k, &v)?;
        }
        plan.options.validate()?;
        Ok(plan)
    }

    pub fn to_kv(&self) -> String {
        let o = &self.options;
        let scopes: Vec<String> = o.scopes.iter().map(|s| s.to_string()).collect();
        let backbone = match o.metrics.lpips_backbone {
            crate::metrics::LpipsBackbone::FixedRandom => "fixed_random",
            crate::metrics::LpipsBackbone::SqueezePretrained => "squeeze_pretrained",
        };
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("data_dir", self.data_dir.display().to_string());
        line("checkpoint", self.checkpoint.display().to_string());
        line("output_dir", self.output_dir.display().to_string());
        line("test_ids", self.test_ids.join(","));
        line("split_ratio", self.split_ratio.to_string());
        line("split_seed", self.split_seed.to_string());
        line(
            "manipulator_kind",
            self.manipulator_kind.map(|k| k.to_string()).unwrap_or_else(|| "checkpoint".into()),
        );
        line(
            "manipulator_weights",
            self.manipulator_weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        line("regions_per_slice", o.regions_per_slice.to_string());
        line("region_seed", o.region_seed.to_string());
        line("region_size", o.region_size.to_string());
        line("heatmap_samples", o.heatmap_samples.to_string());
        line("max_intensity", o.metrics.max_intensity.to_string());
        line("scopes", scopes.join(","));
        line("lpips_backbone", backbone.to_string());
        s
    }

    /// Normalized test slices from the cache.
    pub fn load_test_slices(&self) -> Result<Vec<Array2<f64>>> {
        let cache = SliceCache::open(&self.data_dir)?;
        let ids = if self.test_ids.is_empty() {
            split_dataset(&cache.volume_ids(), self.split_ratio, self.split_seed)?.test_ids
        } else {
            self.test_ids.clone()
        };
        Ok(cache.load_volumes(&ids)?.into_iter().map(|r| r.pixels).collect())
    }

    pub fn manipulator(&self, ckpt: &Checkpoint) -> Result<ManipulatorHandle> {
        match self.manipulator_kind {
            None => Ok(ckpt.manipulator.clone()),
            Some(ManipulatorKind::BlurBlend) => Ok(ManipulatorHandle::blur_blend()),
            Some(kind) if kind == ckpt.manipulator.kind() => Ok(ckpt.manipulator.clone()),
            Some(kind) => {
                let path = self
                    .manipulator_weights
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("manipulator `{kind}` needs `manipulator_weights`")))?;
                ManipulatorHandle::load(path)
            }
        }
    }
}

/// Loads the checkpoint and test split named by `plan` and scores them.
pub fn evaluate(plan: &EvaluationPlan) -> Result<Evaluation> {
    let ckpt = load_checkpoint(&plan.checkpoint)?;
    let m = plan.manipulator(&ckpt)?;
    let slices = plan.load_test_slices()?;
    evaluate_slices(&slices, &ckpt, &m, &plan.options)
}

/// Tamper-square metrics of the protected-and-tampered pair per α, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<(f64, MetricValues)>,
}

impl AblationResult {
    pub fn get(&self, alpha: f64) -> Option<&MetricValues> {
        self.rows.iter().find(|(a, _)| *a == alpha).map(|(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for (a, v) in &self.rows {
            let cells: Vec<String> = Metric::ALL.iter().map(|&m| format_value(v.get(m))).collect();
            writeln!(s, "{a},{}", cells.join(",")).unwrap();
        }
        s
    }
}

/// One fit and one evaluation per α. Runs share every setting but α,
/// including the frozen manipulator.
pub fn ablation_sweep(
    base: &TrainingConfig,
    grid: &[f64],
    train: &[Array2<f64>],
    test: &[Array2<f64>],
    m: &ManipulatorHandle,
    opts: &EvalOptions,
) -> Result<AblationResult> {
    ablation_sweep_with(base, grid, train, test, m, opts, |_, _| {})
}

/// [`ablation_sweep`] that also hands each trained checkpoint to `on_fit`.
pub fn ablation_sweep_with(
    base: &TrainingConfig,
    grid: &[f64],
    train: &[Array2<f64>],
    test: &[Array2<f64>],
    m: &ManipulatorHandle,
    opts: &EvalOptions,
    mut on_fit: impl FnMut(f64, &Checkpoint),
) -> Result<AblationResult> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let opts = EvalOptions {
        scopes: vec![Scope::TamperSquare],
        heatmap_samples: 0,
        ..opts.clone()
    };
    let mut rows = Vec::with_capacity(alphas.len());
    for alpha in alphas {
        let mut run = || -> Result<MetricValues> {
            let cfg = TrainingConfig { alpha, ..base.clone() };
            let ckpt = fit(train, &cfg, m.clone(), None)?;
            on_fit(alpha, &ckpt);
            let eval = evaluate_slices(test, &ckpt, m, &opts)?;
            let report = eval.report(Scope::TamperSquare).expect("scope requested");
            Ok(*report.get(REAL_VS_PROTECTED_TAMPERED).expect("pair present"))
        };
        let v = run().map_err(|e| Error::Ablation {
            alpha,
            source: Box::new(e),
        })?;
        rows.push((alpha, v));
    }
    Ok(AblationResult { rows })
}

/// Metric-as-row table with the baseline columns of the published layout.
pub fn pair_table(report: &MetricReport) -> Result<String> {
    let get = |pair: &str| {
        report
            .get(pair)
            .ok_or_else(|| Error::Invalid(format!("report lacks the `{pair}` row")))
    };
    let (p, pt, ut) = (get(REAL_VS_PROTECTED)?, get(REAL_VS_PROTECTED_TAMPERED)?, get(REAL_VS_UNPROTECTED_TAMPERED)?);
    let mut s = format!("{TABLE_HEADER}\n");
    for m in Metric::ALL {
        writeln!(
            s,
            "{},{},n/a,{},n/a,{}",
            m.label(),
            format_value(p.get(m)),
            format_value(pt.get(m)),
            format_value(ut.get(m))
        )
        .unwrap();
    }
    s.push_str(TABLE_FOOTER);
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes tables, heatmaps and a manifest under `out_dir`. Returns the paths written.
pub fn render_reports(
    evaluation: Option<&Evaluation>,
    ablation: Option<&AblationResult>,
    manifest: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if evaluation.is_none() && ablation.is_none() {
        return Err(Error::Invalid("nothing to render".into()));
    }
    let tables = out_dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
    let mut written = Vec::new();
    if let Some(eval) = evaluation {
        for report in &eval.reports {
            let path = tables.join(format!("{}.csv", report.scope));
            write(&path, &pair_table(report)?)?;
            written.push(path);
        }
        if !eval.heatmaps.is_empty() {
            let dir = out_dir.join("heatmaps");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (stem, map) in &eval.heatmaps {
                let path = dir.join(format!("{stem}.png"));
                write_heatmap_png(map.view(), &path)?;
                written.push(path);
            }
        }
    }
    if let Some(ab) = ablation {
        let path = tables.join("ablation.csv");
        write(&path, &ab.to_csv())?;
        written.push(path);
    }
    let path = out_dir.join("manifest.txt");
    let text = format!("# mitsgan {}\n{manifest}", env!("CARGO_PKG_VERSION"));
    write(&path, &text)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Trainer;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn slices(n: usize) -> Vec<Array2<f64>> {
        let v = generate_phantom(&PhantomSpec::new(64, n, 0.5, 11)).unwrap();
        v.slices().unwrap().into_iter().map(|r| r.pixels).collect()
    }

    fn passthrough_checkpoint(xs: &[Array2<f64>]) -> Checkpoint {
        let cfg = TrainingConfig {
            trunk_width: 16,
            disc_base_width: 2,
            manipulator_kind: ManipulatorKind::BlurBlend,
            ..TrainingConfig::default()
        };
        let x = crate::nn::Tensor::from_planes(xs.iter().map(|s| s.view())).unwrap();
        Trainer::new(&cfg, 64, 64, ManipulatorHandle::blur_blend(), Some(&x))
            .unwrap()
            .checkpoint()
    }

    #[test]
    fn regions_are_seed_stable() {
        let o = EvalOptions {
            regions_per_slice: 3,
            ..EvalOptions::default()
        };
        assert_eq!(o.regions_for(4, 64, 64).unwrap(), o.regions_for(4, 64, 64).unwrap());
        assert_ne!(o.regions_for(4, 64, 64).unwrap(), o.regions_for(5, 64, 64).unwrap());
        assert_eq!(o.regions_for(0, 64, 64).unwrap().len(), 3);
        let bad = EvalOptions {
            regions_per_slice: 0,
            ..EvalOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn passthrough_generator_scores_near_identity() {
        let xs = slices(4);
        let c = passthrough_checkpoint(&xs);
        let m = ManipulatorHandle::blur_blend();
        let eval = evaluate_slices(&xs, &c, &m, &EvalOptions::default()).unwrap();
        assert_eq!(eval.samples.len(), 4);
        assert_eq!(eval.heatmaps.len(), 4);
        let whole = eval.report(Scope::WholeImage).unwrap();
        let square = eval.report(Scope::TamperSquare).unwrap();
        // Passthrough is a fitted approximation: a few HU out of 4095.
        assert!(whole.get(REAL_VS_PROTECTED).unwrap().rmse < 5.0);
        assert!(square.get(REAL_VS_PROTECTED).unwrap().rmse < 5.0);
        for r in [whole, square] {
            for (_, v) in &r.rows {
                for m in Metric::ALL {
                    let x = v.get(m);
                    assert!(x.is_finite() || x == f64::INFINITY);
                }
            }
        }
        let table = pair_table(whole).unwrap();
        assert_eq!(table.lines().next(), Some(TABLE_HEADER));
        assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 5);
    }

    #[test]
    fn render_is_byte_stable() {
        let xs = slices(2);
        let c = passthrough_checkpoint(&xs);
        let m = ManipulatorHandle::blur_blend();
        let opts = EvalOptions {
            heatmap_samples: 0,
            ..EvalOptions::default()
        };
        let eval = evaluate_slices(&xs, &c, &m, &opts).unwrap();
        let ab = AblationResult {
            rows: DEFAULT_ALPHA_GRID
                .iter()
                .map(|&a| (a, eval.report(Scope::TamperSquare).unwrap().rows[1].1))
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        let w1 = render_reports(Some(&eval), Some(&ab), "plan = x\n", &d1).unwrap();
        render_reports(Some(&eval), Some(&ab), "plan = x\n", &d2).unwrap();
        assert!(!d1.join("heatmaps").exists());
        for p in &w1 {
            let rel = p.strip_prefix(&d1).unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(d2.join(rel)).unwrap());
        }
        let ablation = std::fs::read_to_string(d1.join("tables/ablation.csv")).unwrap();
        assert_eq!(ablation.lines().count(), 6);
        assert_eq!(ablation.lines().next(), Some(ABLATION_HEADER));
        assert!(d1.join("tables/whole_image.csv").exists());
        assert!(d1.join("tables/tamper_square.csv").exists());
    }

    #[test]
    fn plan_kv_round_trip() {
        let mut p = EvaluationPlan::new("data", "run/final.safetensors", "out");
        p.set("test_ids", "a, b").unwrap();
        p.set("regions_per_slice", "2").unwrap();
        p.set("scopes", "tamper_square").unwrap();
        p.set("manipulator_kind", "blur_blend").unwrap();
        assert_eq!(EvaluationPlan::from_kv(&p.to_kv()).unwrap(), p);
        assert!(p.set("bogus", "1").is_err());
        assert!(EvaluationPlan::from_kv("regions_per_slice = 0").is_err());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let plan = EvaluationPlan::new(dir.path(), dir.path().join("nope.safetensors"), dir.path());
        assert!(matches!(evaluate(&plan), Err(Error::CheckpointNotFound(_))));
    }
}
