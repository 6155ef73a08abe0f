//! Independent oracles for gradients and verification statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use xrecog::dataset::{self, SyntheticConfig, VisitCount};
use xrecog::encoder::{EncoderConfig, EncoderParams, RawFeatures};
use xrecog::eval::{self, EvalConfig, Orientation, PairLabel, PairSetting, RocCurve, ScoredPair};
use xrecog::metric::{self, MiningStrategy, Triplet};
use xrecog::probe::{self, LinearProbe, ProbeConfig};
use xrecog::trainer;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn small_dataset(sigma: f64, ids: usize, seed: u64) -> dataset::DataSet {
    dataset::generate_synthetic(&SyntheticConfig {
        num_identities: ids,
        visits_per_identity: VisitCount::Fixed(3),
        latent_dim: 3,
        ambient_dim: 6,
        visit_noise_sigma: sigma,
        attributes: vec![],
        projection_seed: seed,
        sample_seed: seed + 1,
        ood_shift: None,
    })
    .unwrap()
}

#[test]
fn triplet_loss_gradient_matches_central_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let d = rng.random_range(1..8);
        let v = |rng: &mut ChaCha20Rng| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let alpha = 0.2;
        if metric::triplet_loss(&a, &p, &n, alpha).unwrap() < 1e-3 {
            continue;
        }
        let (ga, gp, gn) = metric::triplet_loss_grad(&a, &p, &n, alpha).unwrap();
        for (which, g) in [ga, gp, gn].into_iter().enumerate() {
            let fd: Vec<f64> = (0..d)
                .map(|i| {
                    let bump = |delta: f64| {
                        let mut t = [a.clone(), p.clone(), n.clone()];
                        t[which][i] += delta;
                        metric::triplet_loss(&t[0], &t[1], &t[2], alpha).unwrap()
                    };
                    (bump(H) - bump(-H)) / (2.0 * H)
                })
                .collect();
            assert!(rel_err(&g, &fd) < 1e-8, "{g:?} vs {fd:?}");
        }
        checked += 1;
    }
}

#[test]
fn batch_gradient_matches_finite_differences_of_mean_loss() {
    let ds = small_dataset(0.7, 5, 3);
    for (hidden, normalize) in [(vec![], false), (vec![5], true), (vec![4, 4], true)] {
        let mut cfg = EncoderConfig::new(6, hidden, 3);
        cfg.normalize_output = normalize;
        cfg.init_seed = 9;
        let mut params = EncoderParams::init(&cfg).unwrap();
        for layer in params.layers_mut() {
            layer.bias.iter_mut().enumerate().for_each(|(k, b)| *b = 0.1 + 0.05 * k as f64);
        }
        let batch: Vec<usize> = (0..ds.len()).collect();
        let ids: Vec<&str> = ds.records().iter().map(|r| r.patient_id.as_str()).collect();
        let emb: Vec<Vec<f64>> = ds.records().iter().map(|r| params.forward(&r.features).unwrap().0).collect();
        let triplets = metric::mine_triplets(&emb, &ids, MiningStrategy::RandomWithinBatch, 40, 0.2, 1).unwrap();
        // Large margin keeps every hinge active, so the loss is smooth here.
        let alpha = 10.0;
        let (_, grads) = trainer::batch_gradient(&params, &ds, &batch, &triplets, alpha).unwrap();
        let analytic = grads.flatten();
        let mut fd = Vec::new();
        for l in 0..params.layers().len() {
            let nw = params.layers()[l].weights.len();
            for k in 0..nw + params.layers()[l].bias.len() {
                let at = |delta: f64| {
                    let mut p = params.clone();
                    let layer = &mut p.layers_mut()[l];
                    if k < nw {
                        layer.weights[k] += delta;
                    } else {
                        layer.bias[k - nw] += delta;
                    }
                    trainer::batch_gradient(&p, &ds, &batch, &triplets, alpha).unwrap().0
                };
                fd.push((at(H) - at(-H)) / (2.0 * H));
            }
        }
        assert!(rel_err(&analytic, &fd) < 1e-6, "rel err {}", rel_err(&analytic, &fd));

        // One SGD step along the negative gradient lowers the loss.
        let before = trainer::batch_gradient(&params, &ds, &batch, &triplets, alpha).unwrap().0;
        params.apply_update(&grads, 1e-3);
        let after = trainer::batch_gradient(&params, &ds, &batch, &triplets, alpha).unwrap().0;
        assert!(after < before);
    }
}

fn dense_eer(curve: &RocCurve) -> f64 {
    // Bisection along the piecewise-linear curve, parameterized by a
    // continuous point index; fpr + tpr increases along it.
    let pts = &curve.points;
    let at = |t: f64| {
        let k = (t.floor() as usize).min(pts.len() - 2);
        let w = t - k as f64;
        let fpr = pts[k].fpr + w * (pts[k + 1].fpr - pts[k].fpr);
        let tpr = pts[k].tpr + w * (pts[k + 1].tpr - pts[k].tpr);
        (fpr, fpr + tpr - 1.0)
    };
    let (mut lo, mut hi) = (0.0, (pts.len() - 1) as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).1 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi).0
}

fn random_scores(rng: &mut ChaCha20Rng, n: usize, ties: bool) -> Vec<ScoredPair> {
    let mut s: Vec<ScoredPair> = (0..n)
        .map(|_| ScoredPair {
            score: if ties { rng.random_range(0..5) as f64 } else { rng.random_range(0.0..1.0) },
            label: if rng.random_bool(0.4) { PairLabel::Same } else { PairLabel::Different },
        })
        .collect();
    s[0].label = PairLabel::Same;
    s[1].label = PairLabel::Different;
    s
}

#[test]
fn eer_matches_bisection_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for k in 0..300 {
        let n = rng.random_range(2..60);
        let scored = random_scores(&mut rng, n, k % 2 == 0);
        let curve = eval::roc_curve(&scored, Orientation::LowerIsSame).unwrap();
        let e = eval::eer(&curve);
        assert!((e - dense_eer(&curve)).abs() < 1e-9, "{e} vs {}", dense_eer(&curve));
    }
}

#[test]
fn roc_points_match_direct_threshold_counts() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for _ in 0..100 {
        let scored = random_scores(&mut rng, 30, true);
        let curve = eval::roc_curve(&scored, Orientation::LowerIsSame).unwrap();
        let pos = scored.iter().filter(|s| s.label == PairLabel::Same).count() as f64;
        let neg = scored.len() as f64 - pos;
        for p in curve.points.iter().skip(1) {
            let same_at = |l| scored.iter().filter(|s| s.label == l && s.score <= p.threshold).count() as f64;
            assert_eq!(p.tpr, same_at(PairLabel::Same) / pos);
            assert_eq!(p.fpr, same_at(PairLabel::Different) / neg);
        }
    }
}

#[test]
fn score_pairs_matches_naive_distances() {
    let ds = small_dataset(1.0, 12, 8);
    let mut cfg = EncoderConfig::new(6, vec![7], 4);
    cfg.init_seed = 2;
    let params = EncoderParams::init(&cfg).unwrap();
    let pairs = eval::build_pairs(&ds, &PairSetting::RandomNegatives, 20, 40, 3).unwrap();
    let scored = eval::score_pairs(&params, &ds, &pairs).unwrap();
    for (p, s) in pairs.pairs.iter().zip(&scored) {
        let ea = params.forward(&ds.records()[p.a].features).unwrap().0;
        let eb = params.forward(&ds.records()[p.b].features).unwrap().0;
        let mut naive = 0.0;
        for i in 0..ea.len() {
            naive += (ea[i] - eb[i]) * (ea[i] - eb[i]);
        }
        assert!((s.score - naive).abs() < 1e-12);
        assert!((0.0..=4.0 + 1e-12).contains(&s.score));
        assert_eq!(s.label, p.label);
    }
}

#[test]
fn raw_auroc_decreases_with_visit_noise() {
    let aurocs: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&sigma| {
            let ds = dataset::generate_synthetic(&SyntheticConfig {
                num_identities: 50,
                visits_per_identity: VisitCount::Fixed(4),
                latent_dim: 8,
                ambient_dim: 32,
                visit_noise_sigma: sigma,
                attributes: vec![],
                projection_seed: 1,
                sample_seed: 2,
                ood_shift: None,
            })
            .unwrap();
            assert_eq!(ds.len(), 200);
            let cfg = EvalConfig::default();
            let (_, scored) =
                eval::score_setting(&RawFeatures { dim: 32 }, &ds, &PairSetting::RandomNegatives, &cfg, 4).unwrap();
            eval::auroc(&scored).unwrap()
        })
        .collect();
    assert!(aurocs[0] > aurocs[1] && aurocs[1] > aurocs[2], "{aurocs:?}");
}

#[test]
fn probe_objective_gradient_matches_central_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let emb: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<String> = (0..30).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
    let mut cfg = ProbeConfig::new("task");
    cfg.epochs = 3;
    let probe = probe::train_probe(&emb, &labels, &cfg).unwrap();
    let targets: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let l2 = 0.3;
    let (_, grads) = probe::probe_objective(&probe, &emb, &targets, l2).unwrap();
    let objective = |p: &LinearProbe| probe::probe_objective(p, &emb, &targets, l2).unwrap().0;
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for c in 0..3 {
        for j in 0..=4 {
            let bump = |delta: f64| {
                let mut p = probe.clone();
                if j < 4 {
                    p.weights[c][j] += delta;
                } else {
                    p.bias[c] += delta;
                }
                objective(&p)
            };
            fd.push((bump(H) - bump(-H)) / (2.0 * H));
            analytic.push(if j < 4 { grads.weights[c][j] } else { grads.bias[c] });
        }
    }
    assert!(rel_err(&analytic, &fd) < 1e-7, "{analytic:?} vs {fd:?}");
}

#[test]
fn mined_triplets_satisfy_identity_constraints_and_strategy() {
    let ds = small_dataset(1.0, 9, 4);
    let ids: Vec<&str> = ds.records().iter().map(|r| r.patient_id.as_str()).collect();
    let emb: Vec<Vec<f64>> = ds.records().iter().map(|r| r.features.clone()).collect();
    let alpha = 0.5;
    for strategy in [MiningStrategy::RandomWithinBatch, MiningStrategy::SemiHardNegative, MiningStrategy::HardestNegative] {
        let mined = metric::mine_triplets(&emb, &ids, strategy, 100, alpha, 7).unwrap();
        assert_eq!(mined.len(), 100);
        for t in &mined {
            assert!(t.is_valid(&ids));
            let d = |i: usize, j: usize| metric::squared_l2(&emb[i], &emb[j]).unwrap();
            let d_ap = d(t.anchor, t.positive);
            let negatives: Vec<usize> = (0..ids.len()).filter(|&j| ids[j] != ids[t.anchor]).collect();
            let hardest = negatives.iter().map(|&j| d(t.anchor, j)).fold(f64::INFINITY, f64::min);
            match strategy {
                MiningStrategy::HardestNegative => assert_eq!(d(t.anchor, t.negative), hardest),
                MiningStrategy::SemiHardNegative => {
                    let band: Vec<f64> = negatives
                        .iter()
                        .map(|&j| d(t.anchor, j))
                        .filter(|&x| x > d_ap && x < d_ap + alpha)
                        .collect();
                    let want = band.iter().copied().fold(f64::INFINITY, f64::min);
                    let got = d(t.anchor, t.negative);
                    if band.is_empty() {
                        assert_eq!(got, hardest);
                    } else {
                        assert_eq!(got, want);
                    }
                }
                MiningStrategy::RandomWithinBatch => {}
            }
        }
    }
    let t = Triplet::new(0, 1, 2);
    assert!(!t.is_valid(&["p", "q", "r"]));
}
