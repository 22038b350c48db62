//! Acceptance criteria, one check each, run as a single binary so every
//! verdict is printed. Set `ALT_ACCEPTANCE=1,4,8` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use alt_core::ablation::{self, LadderConfig, StageData, StageRemovalConfig, ToyDims, Variant};
use alt_core::ctc::{ctc_loss, ctc_loss_node, CtcPrefixScorer};
use alt_core::decode::{self, DecodeWeights, Scorers};
use alt_core::encoder::SpecAugmentPolicy;
use alt_core::lm::{self, LmConfig, LmScorer};
use alt_core::metrics;
use alt_core::model::{self, HeadKind, Model};
use alt_core::numerics::gradcheck::check_gradients;
use alt_core::numerics::nn::{self, GruWeights, LstmWeights};
use alt_core::numerics::{encode_checkpoint, rng, Array, Graph, ParamStore, Tape, Var, LOG_FLOOR};
use alt_core::s2s::{self, Reduction, S2sConfig, S2sScorer};
use alt_core::ssl;
use alt_core::synth::{self, Domain};
use alt_core::text::{Normalized, Normalizer, TokenInventory};
use alt_core::trainer::{self, PretrainConfig, TrainConfig, Utterance};
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(started: Instant, budget: Duration) -> (bool, String) {
    let e = started.elapsed();
    (e < budget, format!("{:.1}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

// ---------------------------------------------------------------- 1

fn ctc_matches_enumeration() -> Verdict {
    let started = Instant::now();
    let mut r = rng::stream(1, "acceptance-ctc", 0);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut infeasible = 0;
    for _ in 0..400 {
        let t = r.gen_range(1..=6);
        let v = r.gen_range(2..=4);
        let n = r.gen_range(1..=3);
        let logp = random_logp(&mut r, t, v);
        let target: Vec<usize> = (0..n).map(|_| r.gen_range(1..v)).collect();
        let want = brute_force_ctc(&logp, &target, 0);
        let got = ctc_loss(&logp, &target, 0).unwrap();
        if want.is_infinite() {
            infeasible += 1;
            assert!(
                !got.feasible && got.value.is_infinite(),
                "infeasible case scored {}",
                got.value
            );
        } else {
            assert!(got.feasible);
            worst = worst.max((got.value - want).abs());
        }
        cases += 1;
    }
    let uniform = Array::full(&[2, 2], 0.5f64.ln());
    let half = ctc_loss(&uniform, &[1], 0).unwrap().value;
    let known = (half - (-(0.75f64).ln())).abs();
    let (fast, time) = within(started, Duration::from_secs(30));
    verdict(
        worst <= 1e-9 && known <= 1e-9 && fast,
        format!("{cases} cases ({infeasible} infeasible), max |diff| {worst:.2e}, -ln 0.75 case {known:.2e}, {time}"),
    )
}

// ---------------------------------------------------------------- 2

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the checked scalar.
fn weighted_sum(t: &mut Tape, y: Var) -> alt_core::Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut r = rng::stream(11, "weights", shape.iter().product::<usize>() as u64);
    let w = t.constant(random_array(&mut r, &shape, 1.0));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Tape, &[Var]) -> alt_core::Result<Var>,
);

fn op_catalog() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![2, 3], vec![4, 3]], |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("add_const", vec![vec![2, 3]], |t, v| {
            t.add_const(v[0], &Array::full(&[2, 3], 0.7))
        }),
        ("affine", vec![vec![2, 3]], |t, v| Ok(t.affine(v[0], -1.5, 0.3))),
        ("scale", vec![vec![2, 3]], |t, v| Ok(t.scale(v[0], 2.5))),
        ("tanh", vec![vec![2, 3]], |t, v| Ok(t.tanh(v[0]))),
        ("sigmoid", vec![vec![2, 3]], |t, v| Ok(t.sigmoid(v[0]))),
        ("gelu", vec![vec![2, 3]], |t, v| Ok(t.gelu(v[0]))),
        ("leaky_relu", vec![vec![2, 3]], |t, v| Ok(t.leaky_relu(v[0], 0.1))),
        ("softmax", vec![vec![2, 4]], |t, v| Ok(t.softmax(v[0]))),
        ("log_softmax", vec![vec![2, 4]], |t, v| Ok(t.log_softmax(v[0]))),
        ("logsumexp", vec![vec![3, 4]], |t, v| Ok(t.logsumexp(v[0]))),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("conv1d", vec![vec![7, 2], vec![3, 6], vec![3]], |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        ("embedding", vec![vec![4, 3]], |t, v| t.embedding(v[0], &[1, 3, 1, 0])),
        ("concat rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        ("concat cols", vec![vec![2, 3], vec![2, 2]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("slice", vec![vec![4, 3]], |t, v| t.slice(v[0], 0, 1, 2)),
        ("reshape", vec![vec![2, 3]], |t, v| t.reshape(v[0], &[3, 2])),
        ("transpose", vec![vec![2, 3]], |t, v| t.transpose(v[0])),
        ("gather", vec![vec![2, 3]], |t, v| t.gather(v[0], &[5, 0, 2, 2])),
        ("l2_normalize_rows", vec![vec![3, 4]], |t, v| t.l2_normalize_rows(v[0])),
        ("row_replace", vec![vec![3, 2], vec![2]], |t, v| {
            t.row_replace(v[0], v[1], &[false, true, false])
        }),
        ("sum", vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("linear", vec![vec![2, 3], vec![3, 4], vec![4]], |t, v| {
            nn::linear(t, v[0], v[1], Some(v[2]))
        }),
        (
            "gru_cell",
            vec![vec![1, 3], vec![1, 2], vec![3, 6], vec![2, 6], vec![6], vec![6]],
            |t, v| {
                let w = GruWeights {
                    w_ih: v[2],
                    w_hh: v[3],
                    b_ih: v[4],
                    b_hh: v[5],
                };
                nn::gru_cell(t, v[0], v[1], &w)
            },
        ),
        (
            "lstm_cell",
            vec![vec![1, 3], vec![1, 2], vec![1, 2], vec![3, 8], vec![2, 8], vec![8]],
            |t, v| {
                let w = LstmWeights {
                    w_ih: v[3],
                    w_hh: v[4],
                    b: v[5],
                };
                let (h, c) = nn::lstm_cell(t, v[0], v[1], v[2], &w)?;
                t.concat(&[h, c], 1)
            },
        ),
        ("ctc through log_softmax", vec![vec![5, 4]], |t, v| {
            let lp = t.log_softmax(v[0]);
            Ok(ctc_loss_node(t, lp, &[1, 3, 3], 0)?.expect("feasible"))
        }),
        ("contrastive", vec![vec![3, 4], vec![5, 4]], |t, v| {
            ssl::contrastive_loss_node(t, v[0], v[1], &[vec![1, 2, 0], vec![4, 1], vec![0, 3, 2]], 0.5)
        }),
    ]
}

fn gradients_match_finite_differences() -> Verdict {
    let started = Instant::now();
    let (h, tol) = (1e-5, 1e-4);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let catalog = op_catalog();
    for (name, shapes, f) in &catalog {
        for point in 0..10u64 {
            let mut r = rng::stream(2, name, point);
            let inputs: Vec<Array> = shapes.iter().map(|s| random_array(&mut r, s, 1.5)).collect();
            let check = check_gradients(&inputs, h, |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            })
            .unwrap();
            worst = worst.max(check.max_rel_error);
            if !check.passes(tol) {
                failures.push(format!("{name}@{point}: {:.2e}", check.max_rel_error));
            }
        }
    }

    let mut r = rng::stream(2, "s2s", 0);
    let cfg = S2sConfig::toy(6, 5);
    let mut params = ParamStore::new();
    s2s::init_s2s_params(&cfg, &mut params, &mut r);
    let f = random_array(&mut r, &[6, 6], 1.0);
    let s2s_err = param_gradient_error(&params, h, |g: &mut Graph| {
        let fv = g.constant(f.clone());
        s2s::s2s_loss(g, &cfg, fv, 5, 0, &[2, 4, 1, 0], Reduction::Sum)
    });
    worst = worst.max(s2s_err);
    if s2s_err >= tol {
        failures.push(format!("s2s params: {s2s_err:.2e}"));
    }

    let mut r = rng::stream(2, "lm", 0);
    let lcfg = LmConfig {
        emb_dim: 3,
        hidden: 4,
        layers: 2,
        mlp_layers: 1,
        mlp_hidden: 4,
        ..LmConfig::toy(5)
    };
    let mut lparams = ParamStore::new();
    lm::init_lm_params(&lcfg, &mut lparams, &mut r);
    let lm_err = param_gradient_error(&lparams, h, |g: &mut Graph| {
        Ok(lm::batch_nll(g, &lcfg, &[vec![1, 2], vec![3, 3, 4]], 0, 0)?.0)
    });
    worst = worst.max(lm_err);
    if lm_err >= tol {
        failures.push(format!("lm params: {lm_err:.2e}"));
    }

    let inv = TokenInventory::default();
    let dims = ToyDims {
        dim: 8,
        heads: 2,
        blocks: 1,
        decoder_hidden: 8,
    };
    let m = Model::new(
        ablation::toy_model_config(&dims, HeadKind::Hybrid, &inv),
        inv.clone(),
        3,
    )
    .unwrap();
    let utt = synth::generate(&Domain::speechlike(), 1, 2, &inv)
        .unwrap()
        .remove(0)
        .to_utterance(&inv)
        .unwrap();
    let model_err = param_gradient_error(&m.params, h, |g: &mut Graph| {
        let l = model::utterance_loss(g, &m, &utt.features, &utt.target, 0.3, Reduction::Mean, None)?;
        Ok(l.expect("feasible").loss)
    });
    worst = worst.max(model_err);
    if model_err >= tol {
        failures.push(format!("hybrid model: {model_err:.2e}"));
    }

    let (fast, time) = within(started, Duration::from_secs(120));
    verdict(
        failures.is_empty() && fast,
        format!(
            "{} ops x 10 points + s2s, lm, hybrid model; worst rel err {worst:.2e}; {time}{}",
            catalog.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut e: Vec<usize> = s.clone();
                e.push(a);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn decode_finds_exhaustive_optimum() -> Verdict {
    let started = Instant::now();
    let inv = TokenInventory::from_symbols(["<blank>", "<eos>", "A", "B"].map(String::from).to_vec()).unwrap();
    let (eos, start) = (
        inv.label_index(inv.eos()).unwrap(),
        inv.label_index(inv.start_token()).unwrap(),
    );
    let labels = inv.label_count();
    let max_len = 3;
    let candidates = all_sequences(&[2, 3], max_len);
    let mut mismatches = Vec::new();
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut r = rng::stream(3, "exhaustive", draw);
        let frames = r.gen_range(3..=5);
        let logp = random_logp(&mut r, frames, inv.len());
        let scfg = S2sConfig {
            emb_dim: 3,
            hidden: 4,
            attn_dim: 3,
            loc_channels: 2,
            loc_width: 3,
            ..S2sConfig::toy(4, labels)
        };
        let mut sparams = ParamStore::new();
        s2s::init_s2s_params(&scfg, &mut sparams, &mut r);
        let f = random_array(&mut r, &[frames, 4], 1.0);
        let lcfg = LmConfig {
            emb_dim: 3,
            hidden: 4,
            layers: 1,
            mlp_layers: 1,
            mlp_hidden: 4,
            ..LmConfig::toy(labels)
        };
        let mut lparams = ParamStore::new();
        lm::init_lm_params(&lcfg, &mut lparams, &mut r);
        let lambda_b = match draw % 4 {
            0 => 0.0,
            1 => 0.4,
            2 => 1.0,
            _ => r.gen_range(0.0..1.0),
        };
        let lambda_c = match draw % 3 {
            0 => 0.0,
            1 => 0.5,
            _ => r.gen_range(0.0..1.0),
        };
        let w = DecodeWeights {
            lambda_b,
            lambda_c,
            beam: 64,
            max_len: Some(max_len),
            force_end: true,
        };

        let oracle = |seq: &[usize]| -> f64 {
            let ctc = if lambda_b > 0.0 {
                -brute_force_ctc(&logp, seq, inv.blank())
            } else {
                0.0
            };
            let ls: Vec<usize> = seq.iter().map(|&s| inv.label_index(s).unwrap()).collect();
            let mut with_eos = ls.clone();
            with_eos.push(eos);
            let mut g = Graph::inference(&sparams);
            let fv = g.constant(f.clone());
            let nll = s2s::s2s_loss(&mut g, &scfg, fv, frames, start, &with_eos, Reduction::Sum).unwrap();
            let s2s_lp = -g.value(nll).item();
            let mut g = Graph::inference(&lparams);
            let nll = lm::batch_nll(&mut g, &lcfg, &[ls], start, eos).unwrap().0;
            let lm_lp = -g.value(nll).item();
            lambda_b * ctc + (1.0 - lambda_b) * s2s_lp + lambda_c * lm_lp
        };
        let scored: Vec<(f64, &Vec<usize>)> = candidates.iter().map(|c| (oracle(c), c)).collect();
        let best = scored.iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("candidates");

        let s2s_scorer = S2sScorer::new(&sparams, scfg, f.clone()).unwrap();
        let lm_scorer = LmScorer::new(&lparams, lcfg);
        let sc = Scorers {
            inventory: &inv,
            ctc: CtcPrefixScorer::new(&logp, inv.blank()).unwrap(),
            s2s: (lambda_b < 1.0).then_some(&s2s_scorer),
            lm: (lambda_c > 0.0).then_some(&lm_scorer),
        };
        let got = decode::decode(&sc, &w, 1).unwrap();
        let got_score = oracle(&got.best.labels);
        worst = worst.max((got.best.score - got_score).abs());
        if got.best.labels != *best.1 && (got_score - best.0).abs() > 1e-9 {
            mismatches.push(format!(
                "draw {draw}: got {:?} ({got_score:.6}) want {:?} ({:.6})",
                got.best.labels, best.1, best.0
            ));
        }
    }
    let (fast, time) = within(started, Duration::from_secs(60));
    verdict(
        mismatches.is_empty() && worst <= 1e-9 && fast,
        format!(
            "100 draws over {} candidates, max score diff {worst:.2e}, {time}{}",
            candidates.len(),
            mismatches
                .first()
                .map(|m| format!("; {} misses, e.g. {m}", mismatches.len()))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn prefix_score_equals_forward() -> Verdict {
    let mut r = rng::stream(4, "prefix", 0);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..200 {
        let t = r.gen_range(1..=12);
        let v = r.gen_range(2..=6);
        let n = r.gen_range(0..=6);
        let logp = random_logp(&mut r, t, v);
        let target: Vec<usize> = (0..n).map(|_| r.gen_range(1..v)).collect();
        let fwd = -ctc_loss(&logp, &target, 0).map(|l| l.value).unwrap_or(f64::INFINITY);
        let pre = CtcPrefixScorer::new(&logp, 0)
            .unwrap()
            .score_sequence(&target)
            .unwrap()
            .log_final();
        // zero probability is the log floor on the prefix side
        let pre_zero = pre <= LOG_FLOOR;
        if fwd.is_infinite() || pre_zero {
            if fwd.is_infinite() != pre_zero {
                bad += 1;
            }
        } else {
            worst = worst.max((fwd - pre).abs());
        }
    }
    verdict(
        bad == 0 && worst <= 1e-9,
        format!("200 pairs, max |diff| {worst:.2e}, infinity mismatches {bad}"),
    )
}

// ---------------------------------------------------------------- 5

fn toy_overfits() -> Verdict {
    let started = Instant::now();
    let inv = TokenInventory::default();
    let domain = Domain::speechlike().with_noise(0.0);
    let utts = synth::to_utterances(&synth::generate(&domain, 20, 5, &inv).unwrap(), &inv).unwrap();
    let model = Model::new(
        ablation::toy_model_config(&ToyDims::default(), HeadKind::Hybrid, &inv),
        inv.clone(),
        5,
    )
    .unwrap();
    let cfg = TrainConfig {
        lambda_a: 0.2,
        lr_head: 3e-3,
        lr_encoder: 3e-3,
        max_epochs: 200,
        spec_augment: SpecAugmentPolicy::off(),
        seed: 5,
        ..TrainConfig::default()
    };
    let out = trainer::train(model, &utts, &utts, &cfg, |_| {}).unwrap();
    let reached = out.reports.iter().find(|r| r.dev_wer <= 0.05).map(|r| r.epoch);
    // the run stops at the target; later epochs cannot change earlier ones
    let stop = reached.unwrap_or(out.reports.len());
    let losses: Vec<f64> = out.reports[..stop].iter().map(|r| r.train_loss).collect();
    let smoothed = smooth(&losses, 5);
    let rises = smoothed.windows(2).filter(|w| w[1] > w[0]).count();
    let final_wer = out.reports.last().map_or(1.0, |r| r.dev_wer);
    let (fast, time) = within(started, Duration::from_secs(600));
    verdict(
        reached.is_some() && smoothed.len() > 1 && rises == 0 && fast,
        format!(
            "WER <= 5% at epoch {}, WER after 200 epochs {final_wer:.3}, smoothed loss rises before the target {rises}, {time}",
            reached.map_or("never".to_string(), |e| e.to_string())
        ),
    )
}

// ---------------------------------------------------------------- 6

fn pretraining_helps_transfer() -> Verdict {
    let started = Instant::now();
    let inv = TokenInventory::default();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let cfg = StageRemovalConfig {
            seed,
            ..StageRemovalConfig::default()
        };
        let data = StageData::generate(&cfg, &inv).unwrap();
        // dev loss of the checkpoint training returns, the best of its epochs
        let kept = |v| {
            let reports = ablation::run_variant(v, &cfg, &data, &inv).unwrap();
            reports.iter().map(|r| r.dev_loss).fold(f64::INFINITY, f64::min)
        };
        let (pre, scratch) = (kept(Variant::NoFinetune), kept(Variant::Scratch));
        if pre < scratch {
            wins += 1;
        }
        rows.push(format!("{pre:.2}/{scratch:.2}"));
    }
    let (fast, time) = within(started, Duration::from_secs(1800));
    verdict(
        wins >= 4 && fast,
        format!(
            "pretrained lower in {wins}/5 seeds (pretrained/scratch dev loss: {}), {time}",
            rows.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn decoding_ladder_improves() -> Verdict {
    let inv = TokenInventory::default();
    let mut ctc = Vec::new();
    let mut joint = Vec::new();
    let mut fused = Vec::new();
    for seed in 0..5 {
        let cfg = LadderConfig {
            seed,
            ..LadderConfig::default()
        };
        let rows = ablation::ladder_experiment(&cfg, &inv).unwrap();
        let wer = |mode: &str| rows.iter().find(|r| r.mode == mode).unwrap().wer;
        ctc.push(wer("ctc-only"));
        joint.push(wer("joint"));
        fused.push(wer("joint+lm"));
    }
    let (mc, mj, mf) = (median(&ctc), median(&joint), median(&fused));
    let joint_wins = (0..5).filter(|&i| joint[i] <= ctc[i]).count();
    let lm_wins = (0..5).filter(|&i| fused[i] <= joint[i]).count();
    verdict(
        mf <= mj && mj <= mc && joint_wins >= 3 && lm_wins >= 3,
        format!(
            "median WER ctc {mc:.3}, joint {mj:.3}, joint+lm {mf:.3}; joint <= ctc in {joint_wins}/5, +lm <= joint in {lm_wins}/5"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn wer_matches_edit_distance() -> Verdict {
    let mut r = rng::stream(8, "wer", 0);
    let vocab = ["A", "B", "C", "D", "E"];
    let mut bad = 0;
    for _ in 0..1000 {
        let (a, b) = (r.gen_range(0..=8), r.gen_range(0..=8));
        let reference: Vec<&str> = (0..a).map(|_| *vocab.choose(&mut r).unwrap()).collect();
        let hypothesis: Vec<&str> = (0..b).map(|_| *vocab.choose(&mut r).unwrap()).collect();
        if metrics::wer(&reference, &hypothesis).errors() != edit_distance(&reference, &hypothesis) {
            bad += 1;
        }
    }
    let c = metrics::corpus_wer(&[("A", "A"), ("A B C D E F G H I", "Z Y X W V U T S R")]);
    let table = (c.utterance_averaged - 0.5).abs() < 1e-12 && (c.pooled - 0.9).abs() < 1e-12;
    verdict(
        bad == 0 && table,
        format!(
            "1000 pairs, {bad} disagreements; two-utterance corpus gives {:.3} averaged, {:.3} pooled",
            c.utterance_averaged, c.pooled
        ),
    )
}

// ---------------------------------------------------------------- 9

fn normalizer_golden() -> Verdict {
    let input = include_str!("fixtures/normalize_input.txt");
    let expected = include_str!("fixtures/normalize_expected.txt");
    let n = Normalizer::default();
    let got: String = input
        .lines()
        .map(|l| match n.normalize(l) {
            Normalized::Kept(s) => s + "\n",
            Normalized::Dropped(_) => "DROPPED\n".to_string(),
        })
        .collect();
    let diffs: Vec<String> = got
        .lines()
        .zip(expected.lines())
        .enumerate()
        .filter(|(_, (g, e))| g != e)
        .map(|(i, (g, e))| format!("line {}: {g:?} != {e:?}", i + 1))
        .collect();
    verdict(
        got == expected,
        format!(
            "{} lines{}",
            input.lines().count(),
            if diffs.is_empty() {
                String::new()
            } else {
                format!("; {}", diffs.join("; "))
            }
        ),
    )
}

// ---------------------------------------------------------------- 10

fn small_utterances(count: usize, seed: u64, inv: &TokenInventory) -> Vec<Utterance> {
    synth::to_utterances(&synth::generate(&Domain::speechlike(), count, seed, inv).unwrap(), inv).unwrap()
}

fn determinism_run(
    workers: usize,
    inv: &TokenInventory,
    train: &[Utterance],
    dev: &[Utterance],
) -> (Vec<u8>, Vec<u8>, Vec<String>) {
    let dims = ToyDims {
        dim: 16,
        heads: 2,
        blocks: 1,
        decoder_hidden: 16,
    };
    let hybrid = ablation::toy_model_config(&dims, HeadKind::Hybrid, inv);
    let bare = Model::new(hybrid.with_head(HeadKind::None), inv.clone(), 10).unwrap();
    let feats: Vec<Array> = train.iter().map(|u| u.features.clone()).collect();
    let pcfg = PretrainConfig {
        epochs: 1,
        batch_size: 4,
        warmup_utterances: 8,
        seed: 10,
        workers,
        ..PretrainConfig::default()
    };
    let (pretrained, _, _) = trainer::pretrain(bare, &feats, &pcfg, |_| {}).unwrap();
    let pre_bytes = encode_checkpoint(&pretrained.params);
    let tcfg = TrainConfig {
        max_epochs: 2,
        lr_head: 1e-3,
        lr_encoder: 1e-3,
        seed: 10,
        workers,
        ..TrainConfig::default()
    };
    let start = pretrained.with_new_head(HeadKind::Hybrid, 10).unwrap();
    let trained = trainer::train(start, train, dev, &tcfg, |_| {}).unwrap().model;
    let w = DecodeWeights {
        beam: 4,
        lambda_c: 0.0,
        ..DecodeWeights::dsing()
    };
    let pool = trainer::pool(workers).unwrap();
    let hyps = pool.install(|| {
        use rayon::prelude::*;
        dev.par_iter()
            .map(|u| {
                decode::decode_model(&trained, None, &u.features, &w, 1)
                    .unwrap()
                    .best
                    .text
            })
            .collect()
    });
    (pre_bytes, encode_checkpoint(&trained.params), hyps)
}

fn runs_are_deterministic() -> Verdict {
    let inv = TokenInventory::default();
    let train = small_utterances(12, 10, &inv);
    let dev = small_utterances(4, 11, &inv);
    let runs: Vec<_> = [1, 1, 4, 4]
        .iter()
        .map(|&w| determinism_run(w, &inv, &train, &dev))
        .collect();
    let same = runs.windows(2).all(|p| p[0] == p[1]);
    verdict(
        same,
        format!(
            "pretrain and train at 1 and 4 workers, twice each: checkpoints {} bytes, {} transcripts, {}",
            runs[0].1.len(),
            runs[0].2.len(),
            if same { "identical" } else { "differ" }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (
            1,
            "CTC loss equals brute-force path enumeration",
            ctc_matches_enumeration,
        ),
        (
            2,
            "tape gradients match finite differences",
            gradients_match_finite_differences,
        ),
        (
            3,
            "joint beam search finds the exhaustive optimum",
            decode_finds_exhaustive_optimum,
        ),
        (
            4,
            "CTC prefix score of a full sequence equals the forward score",
            prefix_score_equals_forward,
        ),
        (5, "hybrid model overfits a tiny clean corpus", toy_overfits),
        (
            6,
            "pretraining lowers transfer dev loss versus random init",
            pretraining_helps_transfer,
        ),
        (
            7,
            "attention rescoring and LM fusion lower WER",
            decoding_ladder_improves,
        ),
        (8, "WER matches edit distance", wer_matches_edit_distance),
        (9, "normalizer golden file", normalizer_golden),
        (
            10,
            "training and decoding are reproducible across worker counts",
            runs_are_deterministic,
        ),
    ];
    let only: Option<Vec<usize>> = std::env::var("ALT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, title, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id:>2} {title}: {} ({}; {:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
