//! Mixed-modal retrieval evaluation: gallery protocols, the
//! modality-conditional distance rule, ranking, and CMC/mAP/mINP.
//!
//! [`evaluate`] is the production path; [`brute_force_metrics`] recomputes
//! the same report from fully materialized lists and is kept as an oracle.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::NORM_EPS;
use crate::model::EmbeddingRecord;
use crate::rng;
use crate::synthgen::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("degenerate {which} embedding (norm {norm:e})")]
    Degenerate { which: &'static str, norm: f64 },
    #[error("invalid setting: {0}")]
    Setting(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GalleryKind {
    Mix,
    MixCam,
    #[serde(rename = "MixCamID")]
    MixCamId,
    #[serde(rename = "MixID")]
    MixId,
    CrossModal,
    UniModal,
}

impl GalleryKind {
    pub const ALL: [GalleryKind; 6] = [
        GalleryKind::Mix,
        GalleryKind::MixCam,
        GalleryKind::MixCamId,
        GalleryKind::MixId,
        GalleryKind::CrossModal,
        GalleryKind::UniModal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GalleryKind::Mix => "Mix",
            GalleryKind::MixCam => "MixCam",
            GalleryKind::MixCamId => "MixCamID",
            GalleryKind::MixId => "MixID",
            GalleryKind::CrossModal => "CrossModal",
            GalleryKind::UniModal => "UniModal",
        }
    }

    /// Whether `r` stays in the gallery of `q`.
    pub fn keeps(self, q: &EmbeddingRecord, r: &EmbeddingRecord) -> bool {
        match self {
            GalleryKind::Mix => true,
            GalleryKind::MixCam => r.camera != q.camera,
            GalleryKind::MixCamId => !(r.camera == q.camera && r.id == q.id),
            GalleryKind::MixId => !(r.id == q.id && r.modality == q.modality),
            GalleryKind::CrossModal => r.modality != q.modality,
            GalleryKind::UniModal => r.modality == q.modality && !(r.camera == q.camera && r.id == q.id),
        }
    }
}

impl fmt::Display for GalleryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GalleryKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        GalleryKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::Setting(format!("unknown gallery setting {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    FusedRule,
    ErasedOnly,
    RelatedOnly,
}

impl EmbedMode {
    pub const ALL: [EmbedMode; 3] = [EmbedMode::FusedRule, EmbedMode::ErasedOnly, EmbedMode::RelatedOnly];

    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::FusedRule => "fused_rule",
            EmbedMode::ErasedOnly => "erased_only",
            EmbedMode::RelatedOnly => "related_only",
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbedMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        EmbedMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::Setting(format!("unknown embed mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    All,
    /// Each trial keeps one random gallery record per (identity, camera).
    SingleShot { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GallerySetting {
    pub kind: GalleryKind,
    pub embed_mode: EmbedMode,
    pub shot_mode: ShotMode,
}

impl GallerySetting {
    pub fn new(kind: GalleryKind, embed_mode: EmbedMode) -> Self {
        GallerySetting {
            kind,
            embed_mode,
            shot_mode: ShotMode::All,
        }
    }

    pub fn single_shot(mut self, trials: usize, seed: u64) -> Self {
        self.shot_mode = ShotMode::SingleShot { trials, seed };
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.shot_mode {
            ShotMode::SingleShot { trials: 0, .. } => Err(EvalError::Setting("single-shot trials must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// CMC at each of [`CMC_RANKS`].
    pub rank_k: [f64; 4],
    pub map: f64,
    pub minp: f64,
    pub num_queries_used: usize,
    pub num_queries_skipped: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        CMC_RANKS.iter().position(|&r| r == k).map(|i| self.rank_k[i])
    }

    pub fn max_abs_diff(&self, other: &EvalReport) -> f64 {
        self.rank_k
            .iter()
            .zip(&other.rank_k)
            .map(|(a, b)| (a - b).abs())
            .chain([(self.map - other.map).abs(), (self.minp - other.minp).abs()])
            .fold(0.0, f64::max)
    }
}

pub fn build_gallery(query: &EmbeddingRecord, all: &[EmbeddingRecord], kind: GalleryKind) -> Vec<usize> {
    (0..all.len()).filter(|&i| kind.keeps(query, &all[i])).collect()
}

fn cosine(a: &[f64], b: &[f64], which: &'static str) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    for norm in [na, nb] {
        if !(norm > NORM_EPS) {
            return Err(EvalError::Degenerate { which, norm });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// `1 − cosine` under the embedding rule of `mode`.
pub fn pair_distance(q: &EmbeddingRecord, g: &EmbeddingRecord, mode: EmbedMode) -> Result<f64> {
    let c = match mode {
        EmbedMode::FusedRule if q.modality == g.modality => cosine(&q.z_f, &g.z_f, "fused")?,
        EmbedMode::FusedRule | EmbedMode::ErasedOnly => cosine(&q.z_e, &g.z_e, "erased")?,
        EmbedMode::RelatedOnly => cosine(&q.z_r, &g.z_r, "related")?,
    };
    Ok(1.0 - c)
}

/// Gallery positions sorted by ascending distance, ties by position.
pub fn rank(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// `None` when no positive is present.
pub fn average_precision(positive: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        hits += 1;
        sum += hits as f64 / (r + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn inverse_precision(positive: &[bool]) -> Option<f64> {
    let last = positive.iter().rposition(|&p| p)?;
    let count = positive.iter().filter(|&&p| p).count();
    Some(count as f64 / (last + 1) as f64)
}

/// Fraction of queries with a positive within the top `k`; each entry is the
/// positive flags of one ranked list.
pub fn cmc(rankings: &[Vec<bool>], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings.iter().filter(|r| r.iter().take(k).any(|&p| p)).count();
    hits as f64 / rankings.len() as f64
}

/// Pool members used by each trial; a single trial of everything in `All` mode.
fn trial_pools(records: &[EmbeddingRecord], shot: ShotMode) -> Vec<Vec<usize>> {
    match shot {
        ShotMode::All => vec![(0..records.len()).collect()],
        ShotMode::SingleShot { trials, seed } => {
            let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                groups.entry((r.id, r.camera)).or_default().push(i);
            }
            (0..trials)
                .map(|t| {
                    let mut rng = rng::stream(seed, &[t as u64]);
                    let mut pool: Vec<usize> = groups
                        .values()
                        .map(|members| members[rng.random_range(0..members.len())])
                        .collect();
                    pool.sort_unstable();
                    pool
                })
                .collect()
        }
    }
}

#[derive(Default)]
struct Accum {
    rank_hits: [usize; 4],
    ap: f64,
    inp: f64,
    used: usize,
    skipped: usize,
}

fn finish(trials: Vec<Accum>) -> Result<EvalReport> {
    let used: usize = trials.iter().map(|a| a.used).sum();
    let skipped: usize = trials.iter().map(|a| a.skipped).sum();
    let live: Vec<&Accum> = trials.iter().filter(|a| a.used > 0).collect();
    if live.is_empty() {
        return Err(EvalError::Protocol(format!("no usable queries ({skipped} skipped)")));
    }
    let n = live.len() as f64;
    let mut rank_k = [0.0; 4];
    let (mut map, mut minp) = (0.0, 0.0);
    for a in &live {
        let u = a.used as f64;
        for (slot, &h) in rank_k.iter_mut().zip(&a.rank_hits) {
            *slot += h as f64 / u;
        }
        map += a.ap / u;
        minp += a.inp / u;
    }
    Ok(EvalReport {
        rank_k: rank_k.map(|r| r / n),
        map: map / n,
        minp: minp / n,
        num_queries_used: used,
        num_queries_skipped: skipped,
    })
}

/// Queries are all records of `query_modality`; each query is ranked against
/// the remaining pool filtered by the setting's gallery rule.
pub fn evaluate(records: &[EmbeddingRecord], query_modality: Modality, setting: &GallerySetting) -> Result<EvalReport> {
    setting.validate()?;
    let queries: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].modality == query_modality)
        .collect();
    let pools = trial_pools(records, setting.shot_mode);
    let mut trials = Vec::with_capacity(pools.len());
    for pool in &pools {
        let mut acc = Accum::default();
        for &qi in &queries {
            let q = &records[qi];
            let mut gallery = Vec::with_capacity(pool.len());
            for &gi in pool {
                if gi != qi && setting.kind.keeps(q, &records[gi]) {
                    gallery.push((pair_distance(q, &records[gi], setting.embed_mode)?, gi));
                }
            }
            gallery.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut hits = 0usize;
            let mut first = None;
            let mut last = 0;
            let mut ap = 0.0;
            for (r, &(_, gi)) in gallery.iter().enumerate() {
                if records[gi].id == q.id {
                    hits += 1;
                    ap += hits as f64 / (r + 1) as f64;
                    first.get_or_insert(r + 1);
                    last = r + 1;
                }
            }
            let Some(first) = first else {
                acc.skipped += 1;
                continue;
            };
            acc.used += 1;
            acc.ap += ap / hits as f64;
            acc.inp += hits as f64 / last as f64;
            for (slot, &k) in acc.rank_hits.iter_mut().zip(&CMC_RANKS) {
                if first <= k {
                    *slot += 1;
                }
            }
        }
        trials.push(acc);
    }
    finish(trials)
}

/// Definition-level recomputation of [`evaluate`].
pub fn brute_force_metrics(
    records: &[EmbeddingRecord],
    query_modality: Modality,
    setting: &GallerySetting,
) -> Result<EvalReport> {
    setting.validate()?;
    let mut trials = Vec::new();
    for pool in trial_pools(records, setting.shot_mode) {
        let mut acc = Accum::default();
        let mut lists: Vec<Vec<bool>> = Vec::new();
        for (qi, q) in records.iter().enumerate() {
            if q.modality != query_modality {
                continue;
            }
            let subset: Vec<EmbeddingRecord> = pool
                .iter()
                .filter(|&&gi| gi != qi)
                .map(|&gi| records[gi].clone())
                .collect();
            let gallery = build_gallery(q, &subset, setting.kind);
            let mut scored = Vec::new();
            for &g in &gallery {
                scored.push((pair_distance(q, &subset[g], setting.embed_mode)?, g));
            }
            let d: Vec<f64> = scored.iter().map(|s| s.0).collect();
            let flags: Vec<bool> = rank(&d).into_iter().map(|i| subset[scored[i].1].id == q.id).collect();
            let (Some(ap), Some(inp)) = (average_precision(&flags), inverse_precision(&flags)) else {
                acc.skipped += 1;
                continue;
            };
            acc.used += 1;
            acc.ap += ap;
            acc.inp += inp;
            lists.push(flags);
        }
        for (slot, &k) in acc.rank_hits.iter_mut().zip(&CMC_RANKS) {
            *slot = (cmc(&lists, k) * lists.len() as f64).round() as usize;
        }
        trials.push(acc);
    }
    finish(trials)
}

/// Expected AP of a uniformly random ranking of `n` items with `p` positives.
pub fn random_ranking_ap(n: usize, p: usize) -> f64 {
    assert!(p >= 1 && p <= n);
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let n = n as f64;
    if n == 1.0 {
        return 1.0;
    }
    (h + (p as f64 - 1.0) / (n - 1.0) * (n - h)) / n
}

/// Mean over usable queries of the expected AP under random ranking, with the
/// same galleries as [`evaluate`] in `All` shot mode.
pub fn chance_map(records: &[EmbeddingRecord], query_modality: Modality, kind: GalleryKind) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for (qi, q) in records.iter().enumerate().filter(|(_, q)| q.modality == query_modality) {
        let (mut n, mut p) = (0, 0);
        for (gi, g) in records.iter().enumerate() {
            if gi != qi && kind.keeps(q, g) {
                n += 1;
                p += usize::from(g.id == q.id);
            }
        }
        if p > 0 {
            sum += random_ranking_ap(n, p);
            used += 1;
        }
    }
    if used == 0 {
        return Err(EvalError::Protocol("no usable queries".into()));
    }
    Ok(sum / used as f64)
}

pub const HIST_BINS: usize = 64;
/// Cosine distances live in [0, 2].
pub const HIST_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PairStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceDistribution {
    pub intra: PairStats,
    pub inter: PairStats,
    pub intra_hist: Vec<usize>,
    pub inter_hist: Vec<usize>,
}

fn stats(values: &[f64]) -> PairStats {
    if values.is_empty() {
        return PairStats::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    PairStats {
        count: values.len(),
        mean,
        variance,
    }
}

pub fn histogram_bin(d: f64) -> usize {
    ((d / HIST_RANGE * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Intra- and inter-identity distances over every (query, gallery) pair of
/// the setting; values outside [0, 2] are clamped into the end bins.
pub fn distance_distribution(
    records: &[EmbeddingRecord],
    query_modality: Modality,
    setting: &GallerySetting,
) -> Result<DistanceDistribution> {
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for (qi, q) in records.iter().enumerate().filter(|(_, q)| q.modality == query_modality) {
        for (gi, g) in records.iter().enumerate() {
            if gi == qi || !setting.kind.keeps(q, g) {
                continue;
            }
            let d = pair_distance(q, g, setting.embed_mode)?;
            if g.id == q.id { &mut intra } else { &mut inter }.push(d);
        }
    }
    let hist = |v: &[f64]| {
        let mut h = vec![0; HIST_BINS];
        for &d in v {
            h[histogram_bin(d)] += 1;
        }
        h
    };
    Ok(DistanceDistribution {
        intra: stats(&intra),
        inter: stats(&inter),
        intra_hist: hist(&intra),
        inter_hist: hist(&inter),
    })
}

pub const REPORT_HEADER: &str = "setting,embed_mode,query_modality,R1,R5,R10,R20,mAP,mINP,used,skipped";
pub const HIST_HEADER: &str = "bin_lo,bin_hi,intra_count,inter_count";

pub fn report_row(setting: &GallerySetting, query_modality: Modality, r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        setting.kind,
        setting.embed_mode,
        query_modality,
        r.rank_k[0],
        r.rank_k[1],
        r.rank_k[2],
        r.rank_k[3],
        r.map,
        r.minp,
        r.num_queries_used,
        r.num_queries_skipped
    )
}

pub fn histogram_csv(dist: &DistanceDistribution) -> String {
    let mut out = String::from(HIST_HEADER);
    out.push('\n');
    let width = HIST_RANGE / HIST_BINS as f64;
    for b in 0..HIST_BINS {
        writeln!(
            out,
            "{},{},{},{}",
            b as f64 * width,
            (b + 1) as f64 * width,
            dist.intra_hist[b],
            dist.inter_hist[b]
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, modality: Modality, camera: usize, z_e: &[f64], z_r: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord::new(z_e.to_vec(), z_r.to_vec(), id, modality, camera).unwrap()
    }

    fn plain(id: usize, modality: Modality, camera: usize) -> EmbeddingRecord {
        rec(id, modality, camera, &[1.0, 0.0], &[0.0, 1.0])
    }

    #[test]
    fn hand_metrics() {
        let flags = [true, false, true, false];
        assert!((average_precision(&flags).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((inverse_precision(&flags).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, false]), Some(1.0));
        assert_eq!(inverse_precision(&[true, true, false]), Some(1.0));
        let mut last = vec![false; 9];
        last.push(true);
        assert!((average_precision(&last).unwrap() - 0.1).abs() < 1e-15);
        assert!((inverse_precision(&last).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
        assert_eq!(inverse_precision(&[]), None);
    }

    #[test]
    fn cmc_counts() {
        let mut a = vec![false; 10];
        a[0] = true;
        let mut b = vec![false; 10];
        b[6] = true;
        let lists = vec![a, b];
        assert_eq!(cmc(&lists, 1), 0.5);
        assert_eq!(cmc(&lists, 5), 0.5);
        assert_eq!(cmc(&lists, 7), 1.0);
    }

    #[test]
    fn stable_ranking() {
        assert_eq!(rank(&[0.3, 0.1, 0.3]), vec![1, 0, 2]);
        assert!(rank(&[]).is_empty());
    }

    #[test]
    fn rule_table() {
        let q = plain(7, Modality::Infrared, 3);
        let r = plain(7, Modality::Infrared, 3);
        assert!(GalleryKind::Mix.keeps(&q, &r));
        for k in [GalleryKind::MixCam, GalleryKind::MixCamId, GalleryKind::MixId] {
            assert!(!k.keeps(&q, &r), "{k}");
        }
        let distractor = plain(8, Modality::Infrared, 3);
        assert!(GalleryKind::MixCamId.keeps(&q, &distractor));
        assert!(!GalleryKind::MixCam.keeps(&q, &distractor));
        let cross = plain(7, Modality::Visible, 0);
        assert!(GalleryKind::MixId.keeps(&q, &cross));
        assert!(GalleryKind::CrossModal.keeps(&q, &cross));
        assert!(!GalleryKind::UniModal.keeps(&q, &cross));
        let all = vec![r, distractor, cross];
        assert_eq!(build_gallery(&q, &all, GalleryKind::Mix).len(), 3);
    }

    #[test]
    fn distance_rule() {
        let a = rec(0, Modality::Visible, 0, &[1.0, 0.2], &[0.3, 1.0]);
        let b = rec(1, Modality::Visible, 1, &[0.5, 1.0], &[1.0, -0.4]);
        let c = rec(2, Modality::Infrared, 2, &[0.9, -0.1], &[0.2, 0.2]);
        for m in EmbedMode::ALL {
            assert!(pair_distance(&a, &a, m).unwrap().abs() < 1e-9);
        }
        assert_eq!(
            pair_distance(&a, &c, EmbedMode::FusedRule).unwrap(),
            pair_distance(&a, &c, EmbedMode::ErasedOnly).unwrap()
        );
        let fused = pair_distance(&a, &b, EmbedMode::FusedRule).unwrap();
        let erased = pair_distance(&a, &b, EmbedMode::ErasedOnly).unwrap();
        assert!((fused - erased).abs() > 1e-3);
        let zero = EmbeddingRecord {
            z_e: vec![0.0, 0.0],
            ..a.clone()
        };
        assert!(matches!(
            pair_distance(&zero, &c, EmbedMode::ErasedOnly),
            Err(EvalError::Degenerate { .. })
        ));
    }

    #[test]
    fn separable_oracle_is_perfect() {
        // one-hot identity vectors: same id → distance 0, different → 1
        let mut records = Vec::new();
        for id in 0..4 {
            let mut v = vec![0.0; 4];
            v[id] = 1.0;
            for (m, cams) in [(Modality::Visible, [0, 1]), (Modality::Infrared, [2, 3])] {
                for cam in cams {
                    for _ in 0..2 {
                        records.push(rec(id, m, cam, &v, &v));
                    }
                }
            }
        }
        for kind in GalleryKind::ALL {
            for mode in EmbedMode::ALL {
                let s = GallerySetting::new(kind, mode);
                let r = evaluate(&records, Modality::Infrared, &s).unwrap();
                assert_eq!(r.rank_k, [1.0; 4]);
                assert_eq!((r.map, r.minp), (1.0, 1.0));
                assert_eq!(r, brute_force_metrics(&records, Modality::Infrared, &s).unwrap());
            }
        }
        let d = distance_distribution(&records, Modality::Visible, &GallerySetting::new(GalleryKind::Mix, EmbedMode::FusedRule)).unwrap();
        assert!(d.intra.mean.abs() < 1e-12 && (d.inter.mean - 1.0).abs() < 1e-12);
        assert_eq!(d.intra_hist.iter().sum::<usize>(), d.intra.count);
        assert_eq!(d.inter_hist.iter().sum::<usize>(), d.inter.count);
        // 16 V queries: 15 others each, 3 same-id
        assert_eq!(d.intra.count, 16 * 7);
        assert_eq!(d.inter.count, 16 * 24);
    }

    #[test]
    fn no_positive_queries_are_skipped_or_error() {
        let records = vec![plain(0, Modality::Visible, 0), plain(1, Modality::Infrared, 1)];
        let s = GallerySetting::new(GalleryKind::Mix, EmbedMode::FusedRule);
        assert!(matches!(evaluate(&records, Modality::Visible, &s), Err(EvalError::Protocol(_))));
        let records = vec![
            plain(0, Modality::Visible, 0),
            plain(0, Modality::Infrared, 1),
            plain(1, Modality::Visible, 0),
        ];
        let r = evaluate(&records, Modality::Visible, &s).unwrap();
        assert_eq!((r.num_queries_used, r.num_queries_skipped), (1, 1));
    }

    #[test]
    fn zero_trials_rejected() {
        let s = GallerySetting::new(GalleryKind::Mix, EmbedMode::FusedRule).single_shot(0, 1);
        assert!(matches!(evaluate(&[], Modality::Visible, &s), Err(EvalError::Setting(_))));
    }

    #[test]
    fn random_ranking_ap_matches_enumeration() {
        // exhaustive over all placements of p positives among n
        fn enumerate(n: usize, p: usize) -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != p {
                    continue;
                }
                let flags: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                total += average_precision(&flags).unwrap();
                count += 1;
            }
            total / count as f64
        }
        for n in 1..9 {
            for p in 1..=n {
                assert!((random_ranking_ap(n, p) - enumerate(n, p)).abs() < 1e-12, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn names_roundtrip() {
        for k in GalleryKind::ALL {
            assert_eq!(k.name().parse::<GalleryKind>().unwrap(), k);
        }
        for m in EmbedMode::ALL {
            assert_eq!(m.name().parse::<EmbedMode>().unwrap(), m);
        }
        assert!("Nope".parse::<GalleryKind>().is_err());
        assert_eq!(histogram_bin(-0.1), 0);
        assert_eq!(histogram_bin(2.5), HIST_BINS - 1);
    }
}
