use mixer_core::autodiff::{Tape, Tensor};
use mixer_core::evalharness::{self, EmbedMode, GalleryKind, GallerySetting, CMC_RANKS};
use mixer_core::losses::{self, OrthForm};
use mixer_core::miprobe::{self, JointTable};
use mixer_core::model::{self, EmbeddingRecord};
use mixer_core::rng;
use mixer_core::synthgen::Modality;
use mixer_core::trainer::{self, TrainConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const CAMERAS: [Modality; 4] = [Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared];

fn gauss(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn random_records(seed: u64, n: usize, ids: usize) -> Vec<EmbeddingRecord> {
    let mut r = rng::stream(seed, &[7]);
    (0..n)
        .map(|_| {
            let camera = r.random_range(0..CAMERAS.len());
            let (e, rel) = (gauss(&mut r, 3), gauss(&mut r, 3));
            EmbeddingRecord::new(e, rel, r.random_range(0..ids), CAMERAS[camera], camera).unwrap()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

fn excluded(kind: GalleryKind, q: &EmbeddingRecord, g: &EmbeddingRecord) -> bool {
    let same_cam = q.camera == g.camera;
    let same_id = q.id == g.id;
    let same_mod = q.modality == g.modality;
    match kind {
        GalleryKind::Mix => false,
        GalleryKind::MixCam => same_cam,
        GalleryKind::MixCamId => same_cam && same_id,
        GalleryKind::MixId => same_id && same_mod,
        GalleryKind::CrossModal => same_mod,
        GalleryKind::UniModal => !same_mod || (same_cam && same_id),
    }
}

/// Independent recomputation: (rank-k list, mAP, mINP, used, skipped).
fn oracle(records: &[EmbeddingRecord], qm: Modality, kind: GalleryKind, mode: EmbedMode) -> ([f64; 4], f64, f64, usize, usize) {
    let (mut ranks, mut map, mut minp, mut used, mut skipped) = ([0.0; 4], 0.0, 0.0, 0, 0);
    for (qi, q) in records.iter().enumerate().filter(|(_, r)| r.modality == qm) {
        let mut scored: Vec<(f64, usize, bool)> = records
            .iter()
            .enumerate()
            .filter(|&(gi, g)| gi != qi && !excluded(kind, q, g))
            .map(|(gi, g)| {
                let c = match mode {
                    EmbedMode::FusedRule if g.modality == q.modality => {
                        let f = |r: &EmbeddingRecord| {
                            let ne = r.z_e.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let nr = r.z_r.iter().map(|x| x * x).sum::<f64>().sqrt();
                            r.z_e.iter().map(|x| x / ne).chain(r.z_r.iter().map(|x| x / nr)).collect::<Vec<_>>()
                        };
                        cos(&f(q), &f(g))
                    }
                    EmbedMode::FusedRule | EmbedMode::ErasedOnly => cos(&q.z_e, &g.z_e),
                    EmbedMode::RelatedOnly => cos(&q.z_r, &g.z_r),
                };
                (1.0 - c, gi, g.id == q.id)
            })
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let positions: Vec<usize> = scored.iter().enumerate().filter(|(_, s)| s.2).map(|(i, _)| i + 1).collect();
        if positions.is_empty() {
            skipped += 1;
            continue;
        }
        used += 1;
        let ap: f64 = positions.iter().enumerate().map(|(h, &p)| (h + 1) as f64 / p as f64).sum::<f64>() / positions.len() as f64;
        map += ap;
        minp += positions.len() as f64 / *positions.last().unwrap() as f64;
        for (slot, &k) in ranks.iter_mut().zip(&CMC_RANKS) {
            if positions[0] <= k {
                *slot += 1.0;
            }
        }
    }
    let u = used as f64;
    (ranks.map(|r| r / u), map / u, minp / u, used, skipped)
}

#[test]
fn hand_metrics() {
    let ap = evalharness::average_precision(&[true, false, true, false]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    let inp = evalharness::inverse_precision(&[true, false, true, false]).unwrap();
    assert!((inp - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(evalharness::average_precision(&[false, false]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evaluate_matches_independent_oracle(seed in any::<u64>(), n in 8usize..80, ids in 2usize..8) {
        let records = random_records(seed, n, ids);
        for kind in GalleryKind::ALL {
            for mode in EmbedMode::ALL {
                for qm in Modality::ALL {
                    let setting = GallerySetting::new(kind, mode);
                    let got = evalharness::evaluate(&records, qm, &setting);
                    let (ranks, map, minp, used, skipped) = oracle(&records, qm, kind, mode);
                    if used == 0 {
                        prop_assert!(got.is_err());
                        continue;
                    }
                    let got = got.unwrap();
                    prop_assert_eq!((got.num_queries_used, got.num_queries_skipped), (used, skipped));
                    prop_assert!((got.map - map).abs() < 1e-12);
                    prop_assert!((got.minp - minp).abs() < 1e-12);
                    for (a, b) in got.rank_k.iter().zip(&ranks) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn evaluate_matches_brute_force_single_shot(seed in any::<u64>(), n in 8usize..80, trials in 1usize..4) {
        let records = random_records(seed, n, 4);
        for kind in GalleryKind::ALL {
            for mode in EmbedMode::ALL {
                let setting = GallerySetting::new(kind, mode).single_shot(trials, seed);
                let a = evalharness::evaluate(&records, Modality::Infrared, &setting);
                let b = evalharness::brute_force_metrics(&records, Modality::Infrared, &setting);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        prop_assert!(a.max_abs_diff(&b) < 1e-12);
                        prop_assert_eq!(a.num_queries_used, b.num_queries_used);
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "evaluate and brute force disagree on failure"),
                }
            }
        }
    }

    #[test]
    fn gallery_containment_chain(seed in any::<u64>(), n in 2usize..60) {
        let records = random_records(seed, n, 5);
        let set = |q: &EmbeddingRecord, k| evalharness::build_gallery(q, &records, k);
        for q in &records {
            let mix = set(q, GalleryKind::Mix);
            let cam = set(q, GalleryKind::MixCam);
            let camid = set(q, GalleryKind::MixCamId);
            let id = set(q, GalleryKind::MixId);
            prop_assert!(cam.iter().all(|i| camid.contains(i)));
            prop_assert!(camid.iter().all(|i| mix.contains(i)));
            prop_assert!(id.iter().all(|i| mix.contains(i)));
            let cross = set(q, GalleryKind::CrossModal);
            prop_assert!(cross.iter().all(|&i| records[i].modality != q.modality));
        }
    }

    #[test]
    fn metrics_are_bounded_and_cmc_monotone(flags in prop::collection::vec(any::<bool>(), 1..40)) {
        if let Some(ap) = evalharness::average_precision(&flags) {
            let inp = evalharness::inverse_precision(&flags).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
            prop_assert!(inp > 0.0 && inp <= 1.0);
            prop_assert!(inp + 1e-15 >= flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64);
            let p = flags.iter().filter(|&&f| f).count();
            let top = flags[..p].iter().all(|&f| f);
            prop_assert_eq!(top, (inp - 1.0).abs() < 1e-15);
        }
        let lists = vec![flags.clone()];
        let mut prev = 0.0;
        for k in 1..=flags.len() {
            let c = evalharness::cmc(&lists, k);
            prop_assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn double_labels_is_a_bijection(pairs in prop::collection::vec((0usize..20, any::<bool>()), 1..60)) {
        let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mods: Vec<Modality> = pairs.iter().map(|p| if p.1 { Modality::Infrared } else { Modality::Visible }).collect();
        let doubled = losses::double_labels(&ids, &mods, 20).unwrap();
        for (i, a) in doubled.iter().enumerate() {
            prop_assert!(*a < 40);
            for (j, b) in doubled.iter().enumerate() {
                prop_assert_eq!(a == b, ids[i] == ids[j] && mods[i] == mods[j]);
            }
        }
    }

    #[test]
    fn orthogonality_loss_is_a_mean_squared_cosine(seed in any::<u64>(), rows in 1usize..10) {
        let mut r = rng::stream(seed, &[1]);
        let a = Tensor::from_vec(rows, 4, gauss(&mut r, rows * 4)).unwrap();
        let b = Tensor::from_vec(rows, 4, gauss(&mut r, rows * 4)).unwrap();
        let want: f64 = (0..rows).map(|i| cos(a.row(i), b.row(i)).powi(2)).sum::<f64>() / rows as f64;
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let l = losses::loss_orth(&mut tape, va, vb, OrthForm::Squared).unwrap();
        let got = tape.value(l).item();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fusion_loss_is_permutation_invariant(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[2]);
        let n = 12;
        let ids: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mods: Vec<Modality> = (0..n).map(|i| Modality::ALL[(i / 3) % 2]).collect();
        let e = gauss(&mut r, n * 4);
        let rel = gauss(&mut r, n * 4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let value = |order: &[usize]| {
            let pick = |src: &[f64]| order.iter().flat_map(|&i| src[i * 4..i * 4 + 4].to_vec()).collect::<Vec<_>>();
            let mut tape = Tape::new();
            let ze = tape.leaf(Tensor::from_vec(n, 4, pick(&e)).unwrap());
            let zr = tape.leaf(Tensor::from_vec(n, 4, pick(&rel)).unwrap());
            let zf = losses::fused(&mut tape, ze, zr).unwrap();
            let oi: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
            let om: Vec<Modality> = order.iter().map(|&i| mods[i]).collect();
            let l = losses::loss_fusion(&mut tape, ze, zf, &oi, &om, 0.3).unwrap();
            tape.value(l).item()
        };
        let base = value(&(0..n).collect::<Vec<_>>());
        prop_assert!(base >= 0.0);
        prop_assert!((value(&perm) - base).abs() < 1e-12);
    }

    #[test]
    fn fused_embedding_has_norm_sqrt2(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[3]);
        let f = model::fuse(&gauss(&mut r, 5), &gauss(&mut r, 3)).unwrap();
        let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn information_identities(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[4]);
        let t: JointTable = miprobe::random_table(&["a", "b", "c"], &[2, 3, 2], &mut r);
        let i_ab = t.mutual_info(&[0], &[1]).unwrap();
        prop_assert!(i_ab >= -1e-12);
        prop_assert!((i_ab - t.mutual_info(&[1], &[0]).unwrap()).abs() < 1e-12);
        prop_assert!(i_ab <= t.entropy(&[0]).unwrap().min(t.entropy(&[1]).unwrap()) + 1e-12);
        let chain = t.mutual_info(&[0], &[2]).unwrap() + t.cond_mutual_info(&[0], &[1], &[2]).unwrap();
        prop_assert!((t.mutual_info(&[0], &[1, 2]).unwrap() - chain).abs() < 1e-12);
        let ii = t.interaction_info(&[0], &[1], &[2]).unwrap();
        prop_assert!((ii - (i_ab - t.cond_mutual_info(&[0], &[1], &[2]).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_never_rises_after_warmup(base in 1e-5f64..1e-2, warm in 0usize..12) {
        let cfg = TrainConfig { base_lr: base, warmup_epochs: warm, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for epoch in warm..cfg.epochs {
            let lr = trainer::lr_at(epoch, &cfg);
            prop_assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
        for epoch in 0..warm {
            prop_assert!(trainer::lr_at(epoch, &cfg) <= base + 1e-18);
        }
    }
}
