//! Video scoring, ROC-AUC and the statistical analyses: effect sizes,
//! rank tests, one-way ANOVA and trajectory power spectra.

use std::collections::{BTreeMap, HashMap};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::exec;
use crate::kinematics::{region_means, sequence_order_means, FeatureConfig, WindowFeatures};
use crate::network::{predict, Batch, ModelParams};
use crate::trajectory::{Label, NormalizedSequence, RegionIndex};

/// Shortest series accepted by [`trajectory_psd`].
pub const MIN_PSD_LEN: usize = 16;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of the per-window sigmoid outputs.
pub fn video_score(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyVideo);
    }
    Ok(logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub logits: Vec<f64>,
    pub score: f64,
    pub label: Option<Label>,
    pub generator_tag: Option<String>,
}

/// Eval-mode logits for each window, in input order.
pub fn window_logits(params: &ModelParams, windows: &[WindowFeatures], batch_size: usize) -> Result<Vec<f64>> {
    let chunks: Vec<&[WindowFeatures]> = windows.chunks(batch_size.max(1)).collect();
    let parts = exec::map(&chunks, |chunk| {
        let rows: Vec<&WindowFeatures> = chunk.iter().collect();
        predict(&Batch::from_windows(&rows)?, params)
    });
    let mut out = Vec::with_capacity(windows.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Groups window logits by video, in order of first appearance.
pub fn score_videos(windows: &[WindowFeatures], logits: &[f64]) -> Result<Vec<ScoredVideo>> {
    if windows.len() != logits.len() {
        return Err(Error::ShapeMismatch(format!("{} windows but {} logits", windows.len(), logits.len())));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut videos: Vec<ScoredVideo> = Vec::new();
    for (w, &z) in windows.iter().zip(logits) {
        let slot = *index.entry(&w.video_id).or_insert_with(|| {
            videos.push(ScoredVideo { video_id: w.video_id.clone(), logits: Vec::new(), score: 0.0, label: w.label, generator_tag: None });
            videos.len() - 1
        });
        videos[slot].logits.push(z);
    }
    for v in &mut videos {
        v.score = video_score(&v.logits)?;
    }
    Ok(videos)
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Sizes of the groups of tied values.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

/// Area under the ROC curve; `positive` marks the fake class.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standardized mean difference `(mean_a - mean_b) / pooled_sd`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput("each group needs at least 2 samples".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * sample_var(a) + (nb - 1.0) * sample_var(b)) / (na + nb - 2.0);
    if !(pooled > 0.0) {
        return Err(Error::ZeroPooledVariance);
    }
    Ok((mean(a) - mean(b)) / pooled.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided, normal approximation with tie and continuity corrections.
    pub p: f64,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("each group needs at least 1 sample".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u_a = r_a - na * (na + 1.0) / 2.0;
    let u_b = na * nb - u_a;
    let ties: f64 = tie_groups(&pooled).into_iter().map(|t| (t * t * t - t) as f64).sum();
    let var = if n > 1.0 { na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0))) } else { 0.0 };
    let p = if var > 0.0 {
        let z = ((u_a - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(MannWhitney { u_a, u_b, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA across `groups`.
pub fn anova_f(groups: &[&[f64]]) -> Result<Anova> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InvalidInput("need at least 2 groups of at least 2 samples".into()));
    }
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    if !(ssw > 0.0) {
        return Err(Error::ZeroWithinVariance);
    }
    let (df_between, df_within) = (k - 1, n - k);
    let f = (ssb / df_between as f64) / (ssw / df_within as f64);
    let dist = FisherSnedecor::new(df_between as f64, df_within as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = dist.sf(f).clamp(0.0, 1.0);
    Ok(Anova { f, p, df_between, df_within })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    /// Bin width `fs / N`.
    pub df: f64,
}

impl Psd {
    /// Integrated power over bins with `lo <= f <= hi`.
    pub fn band_energy(&self, lo: f64, hi: f64) -> f64 {
        self.freqs.iter().zip(&self.power).filter(|(&f, _)| f >= lo && f <= hi).map(|(_, &p)| p * self.df).sum()
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.df
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())).collect()
}

/// The mean-removed series multiplied by the Hann window.
pub fn windowed(series: &[f64]) -> Vec<f64> {
    // Centering on the first sample first keeps a constant series exactly zero.
    let x0 = series.first().copied().unwrap_or(0.0);
    let shifted: Vec<f64> = series.iter().map(|x| x - x0).collect();
    let m = mean(&shifted);
    shifted.iter().zip(hann(series.len())).map(|(x, w)| (x - m) * w).collect()
}

/// One-sided Hann periodogram. Normalized so that the integrated power
/// `sum(power) * df` equals the mean square of [`windowed`]`(series)`.
pub fn trajectory_psd(series: &[f64], fs: f64) -> Result<Psd> {
    if series.len() < MIN_PSD_LEN {
        return Err(Error::SeriesTooShort { len: series.len(), min: MIN_PSD_LEN });
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::InvalidInput(format!("sampling rate {fs} must be positive")));
    }
    let n = series.len();
    let mut buf: Vec<Complex<f64>> = windowed(series).into_iter().map(|x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64 * fs);
    let power = (0..=n / 2)
        .map(|k| {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            let fold = if edge { 1.0 } else { 2.0 };
            fold * buf[k].norm_sqr() * scale
        })
        .collect();
    Ok(Psd { freqs: (0..=n / 2).map(|k| k as f64 * fs / n as f64).collect(), power, df: fs / n as f64 })
}

/// Average periodogram over equal-length series.
pub fn mean_psd<S: AsRef<[f64]>>(series: &[S], fs: f64) -> Result<Psd> {
    let first = series.first().ok_or_else(|| Error::InvalidInput("no series for spectrum".into()))?;
    let len = first.as_ref().len();
    if series.iter().any(|s| s.as_ref().len() != len) {
        return Err(Error::InvalidInput("series lengths differ".into()));
    }
    let mut acc = trajectory_psd(first.as_ref(), fs)?;
    for s in &series[1..] {
        let p = trajectory_psd(s.as_ref(), fs)?;
        acc.power.iter_mut().zip(p.power).for_each(|(a, b)| *a += b);
    }
    acc.power.iter_mut().for_each(|p| *p /= series.len() as f64);
    Ok(acc)
}

/// Mean y-axis periodogram over all landmarks of one sequence.
pub fn sequence_psd(seq: &NormalizedSequence) -> Result<Psd> {
    let n_landmarks = seq.frames.first().map_or(0, |f| f.len());
    let series: Vec<Vec<f64>> = (0..n_landmarks).map(|lm| seq.series(lm, 1)).collect();
    mean_psd(&series, seq.fps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatReport {
    pub name: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub cohens_d: f64,
    pub u: f64,
    pub u_p: f64,
    pub f: f64,
    pub f_p: f64,
}

impl StatReport {
    pub const CSV_HEADER: &'static str = "name,n_a,n_b,mean_a,std_a,mean_b,std_b,cohens_d,u,u_p,f,f_p";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.n_a,
            self.n_b,
            self.mean_a,
            self.std_a,
            self.mean_b,
            self.std_b,
            self.cohens_d,
            self.u,
            self.u_p,
            self.f,
            self.f_p
        )
    }
}

/// Two-group comparison; `a` is the fake group, `b` the real group.
pub fn stat_report(name: &str, a: &[f64], b: &[f64]) -> Result<StatReport> {
    let mw = mann_whitney_u(a, b)?;
    let anova = anova_f(&[a, b])?;
    Ok(StatReport {
        name: name.to_string(),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: mean(a),
        std_a: sample_var(a).sqrt(),
        mean_b: mean(b),
        std_b: sample_var(b).sqrt(),
        cohens_d: cohens_d(a, b)?,
        u: mw.u_a,
        u_p: mw.p,
        f: anova.f,
        f_p: anova.p,
    })
}

pub const ORDER_NAMES: [&str; 4] = ["displacement", "velocity", "acceleration", "jerk"];
pub const REGION_NAMES: [&str; 4] = ["lower_inner", "lower_outer", "upper", "perioral"];

fn split_by_label<T: Copy>(seqs: &[NormalizedSequence], values: &[Vec<T>]) -> Result<(Vec<T>, Vec<T>)> {
    let (mut fake, mut real) = (Vec::new(), Vec::new());
    for (s, v) in seqs.iter().zip(values) {
        match s.label {
            Some(Label::Fake) => fake.extend_from_slice(v),
            Some(Label::Real) => real.extend_from_slice(v),
            None => return Err(Error::InvalidInput(format!("sequence `{}` has no label", s.video_id))),
        }
    }
    Ok((fake, real))
}

/// Fake-versus-real comparison of per-window mean y-std at orders 0..=3.
pub fn order_stat_reports(seqs: &[NormalizedSequence], cfg: &FeatureConfig) -> Result<Vec<StatReport>> {
    let per_seq: Vec<Vec<[f64; 4]>> = exec::map(seqs, |s| sequence_order_means(s, cfg)).into_iter().collect::<Result<_>>()?;
    let (fake, real) = split_by_label(seqs, &per_seq)?;
    (0..4)
        .map(|k| {
            let a: Vec<f64> = fake.iter().map(|w| w[k]).collect();
            let b: Vec<f64> = real.iter().map(|w| w[k]).collect();
            stat_report(ORDER_NAMES[k], &a, &b)
        })
        .collect()
}

/// Fake-versus-real comparison of per-window region-mean y-std.
pub fn region_stat_reports(seqs: &[NormalizedSequence], cfg: &FeatureConfig, regions: &RegionIndex) -> Result<Vec<StatReport>> {
    let per_seq: Vec<Vec<[f64; 4]>> = exec::map(seqs, |s| {
        crate::kinematics::windows(s.len(), cfg)
            .map(|starts| starts.into_iter().map(|st| region_means(&s.frames[st..st + cfg.window_len], regions)).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let (fake, real) = split_by_label(seqs, &per_seq)?;
    (0..4)
        .map(|k| {
            let a: Vec<f64> = fake.iter().map(|w| w[k]).collect();
            let b: Vec<f64> = real.iter().map(|w| w[k]).collect();
            stat_report(REGION_NAMES[k], &a, &b)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucRow {
    pub scope: String,
    pub n_videos: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: AucRow,
    pub per_generator: Vec<AucRow>,
    /// Mean of the per-generator AUCs.
    pub generator_mean: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,n_videos,auc\n");
        for row in std::iter::once(&self.overall).chain(&self.per_generator) {
            out.push_str(&format!("{},{},{}\n", row.scope, row.n_videos, row.auc));
        }
        let n: usize = self.per_generator.iter().map(|r| r.n_videos).sum();
        out.push_str(&format!("generator_mean,{},{}\n", n, self.generator_mean));
        out
    }
}

fn auc_row(scope: String, videos: &[&ScoredVideo]) -> Result<AucRow> {
    let scores: Vec<f64> = videos.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = videos.iter().map(|v| v.label.is_some_and(|l| l.is_fake())).collect();
    Ok(AucRow { scope, n_videos: videos.len(), auc: roc_auc(&scores, &labels)? })
}

/// Overall AUC plus one AUC per fake-generator tag, each computed over all
/// real videos and the fakes carrying that tag.
pub fn evaluate(videos: &[ScoredVideo]) -> Result<EvalReport> {
    if videos.iter().any(|v| v.label.is_none()) {
        return Err(Error::InvalidInput("evaluation needs labelled videos".into()));
    }
    let all: Vec<&ScoredVideo> = videos.iter().collect();
    let overall = auc_row("overall".into(), &all)?;
    let real: Vec<&ScoredVideo> = videos.iter().filter(|v| v.label == Some(Label::Real)).collect();
    let mut by_tag: BTreeMap<&str, Vec<&ScoredVideo>> = BTreeMap::new();
    for v in videos.iter().filter(|v| v.label == Some(Label::Fake)) {
        by_tag.entry(v.generator_tag.as_deref().unwrap_or("untagged")).or_default().push(v);
    }
    let per_generator = by_tag
        .into_iter()
        .map(|(tag, fakes)| {
            let subset: Vec<&ScoredVideo> = real.iter().copied().chain(fakes).collect();
            auc_row(format!("generator:{tag}"), &subset)
        })
        .collect::<Result<Vec<_>>>()?;
    let generator_mean = per_generator.iter().map(|r| r.auc).sum::<f64>() / per_generator.len() as f64;
    Ok(EvalReport { overall, per_generator, generator_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn video_score_examples() {
        assert_eq!(video_score(&[0.0, 0.0]).unwrap(), 0.5);
        let l3 = 3f64.ln();
        assert!((video_score(&[l3, -l3]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(video_score(&[]), Err(Error::EmptyVideo)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &[true, false, false, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn cohens_d_examples() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), -1.0);
        assert_eq!(cohens_d(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cohens_d(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::ZeroPooledVariance)));
    }

    #[test]
    fn mann_whitney_examples() {
        assert_eq!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap().u_a, 0.0);
        assert_eq!(mann_whitney_u(&[5.0], &[1.0]).unwrap().u_a, 1.0);
        let a = [1.0, 2.0, 3.0, 4.0];
        let same = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(same.u_a, 8.0);
        assert!(same.p > 0.99);
    }

    #[test]
    fn anova_examples() {
        let r = anova_f(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert!((r.f - 13.5).abs() < 1e-12);
        assert_eq!(anova_f(&[&[1.0, 3.0], &[3.0, 1.0]]).unwrap().f, 0.0);
        assert!(matches!(anova_f(&[&[1.0, 1.0], &[2.0, 2.0]]), Err(Error::ZeroWithinVariance)));
    }

    #[test]
    fn psd_examples() {
        let flat = trajectory_psd(&[0.7; 64], 25.0).unwrap();
        assert!(flat.power.iter().all(|&p| p == 0.0));
        let sine: Vec<f64> = (0..250).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / 25.0).sin()).collect();
        let psd = trajectory_psd(&sine, 25.0).unwrap();
        assert!(psd.band_energy(4.0, 6.0) >= 0.99 * psd.total());
        assert!(matches!(trajectory_psd(&[1.0; 15], 25.0), Err(Error::SeriesTooShort { .. })));
    }

    /// Direct DFT power spectrum, independent of the FFT path.
    fn dft_psd(series: &[f64], fs: f64) -> Vec<f64> {
        let x = windowed(series);
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                let fold = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
                fold * (re * re + im * im) / (n as f64 * fs)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            pairs in prop::collection::vec((0u8..8, any::<bool>()), 2..50),
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let pos: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            prop_assert_eq!(roc_auc(&scores, &pos).unwrap(), brute_auc(&scores, &pos));
            let flipped: Vec<bool> = pos.iter().map(|p| !p).collect();
            let sum = roc_auc(&scores, &pos).unwrap() + roc_auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() * 7.0 - 2.0).collect();
            prop_assert_eq!(roc_auc(&warped, &pos).unwrap(), roc_auc(&scores, &pos).unwrap());
        }

        #[test]
        fn cohens_d_symmetry_and_affine_invariance(
            a in prop::collection::vec(-5.0f64..5.0, 2..20),
            b in prop::collection::vec(-5.0f64..5.0, 2..20),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let d = cohens_d(&a, &b).unwrap();
            prop_assert!((d + cohens_d(&b, &a).unwrap()).abs() < 1e-12);
            let map = |xs: &[f64]| xs.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
            prop_assert!((cohens_d(&map(&a), &map(&b)).unwrap() - d).abs() < 1e-9 * (1.0 + d.abs()));
        }

        #[test]
        fn u_statistics_sum_to_pair_count(
            a in prop::collection::vec(0u8..6, 1..15),
            b in prop::collection::vec(0u8..6, 1..15),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let mw = mann_whitney_u(&a, &b).unwrap();
            prop_assert_eq!(mw.u_a + mw.u_b, (a.len() * b.len()) as f64);
            prop_assert!((0.0..=1.0).contains(&mw.p));
        }

        #[test]
        fn two_group_anova_is_squared_t(
            a in prop::collection::vec(-5.0f64..5.0, 2..20),
            b in prop::collection::vec(-5.0f64..5.0, 2..20),
        ) {
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let sp2 = ((na - 1.0) * sample_var(&a) + (nb - 1.0) * sample_var(&b)) / (na + nb - 2.0);
            let t = (mean(&a) - mean(&b)) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
            let r = anova_f(&[&a, &b]).unwrap();
            prop_assert!((r.f - t * t).abs() <= 1e-9 * (1.0 + t * t));
            prop_assert!((0.0..=1.0).contains(&r.p));
        }

        #[test]
        fn psd_parseval_and_dft_agreement(
            xs in prop::collection::vec(-1.0f64..1.0, 16..90),
            fs in 1.0f64..60.0,
        ) {
            let psd = trajectory_psd(&xs, fs).unwrap();
            let w = windowed(&xs);
            let ms = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            prop_assert!((psd.total() - ms).abs() <= 1e-9 * ms.max(1e-300));
            for (p, q) in psd.power.iter().zip(dft_psd(&xs, fs)) {
                prop_assert!((p - q).abs() <= 1e-9 * (q.abs() + 1e-12));
            }
        }
    }

    fn scored(id: &str, score: f64, label: Label, tag: &str) -> ScoredVideo {
        ScoredVideo { video_id: id.into(), logits: vec![], score, label: Some(label), generator_tag: Some(tag.into()) }
    }

    #[test]
    fn generator_mean_examples() {
        let vs = vec![
            scored("r1", 0.2, Label::Real, "real"),
            scored("r2", 0.4, Label::Real, "real"),
            scored("a1", 0.9, Label::Fake, "a"),
            scored("b1", 0.3, Label::Fake, "b"),
        ];
        let rep = evaluate(&vs).unwrap();
        assert_eq!(rep.per_generator[0].auc, 1.0);
        assert_eq!(rep.per_generator[1].auc, 0.5);
        assert_eq!(rep.generator_mean, 0.75);
        let one = vec![vs[0].clone(), vs[1].clone(), vs[2].clone()];
        let rep = evaluate(&one).unwrap();
        assert_eq!(rep.per_generator[0].auc, rep.overall.auc);
        assert!(rep.to_csv().starts_with("scope,n_videos,auc\noverall,3,1\n"));
    }

    #[test]
    fn grouping_preserves_first_appearance() {
        let w = |id: &str| WindowFeatures {
            video_id: id.into(),
            window_start: 0,
            temporal: vec![],
            stats: vec![],
            region: [0.0; 8],
            label: Some(Label::Real),
        };
        let ws = vec![w("b"), w("a"), w("b")];
        let vs = score_videos(&ws, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(vs[0].video_id, "b");
        assert_eq!(vs[0].logits, vec![0.0, 0.0]);
        assert_eq!(vs[1].score, sigmoid(1.0));
    }
}
