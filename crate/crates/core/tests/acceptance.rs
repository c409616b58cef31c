//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Tolerances are pinned below.

use std::time::{Duration, Instant};

use air_core::adversary::PgdConfig;
use air_core::config::ExperimentConfig;
use air_core::corruption::{CorruptionKind, CorruptionSpec};
use air_core::encoder::{Encoder, EncoderSpec};
use air_core::eval::{corruption_accuracy, robust_accuracy, standard_accuracy};
use air_core::finetune::{finetune, FinetuneConfig, FinetuneMode};
use air_core::objectives::{
    air_loss, kl_batch, probability_table, sir_loss, uncalibrated_air, TableKind, ViewBatch,
    ViewBranch,
};
use air_core::rng::rng_for;
use air_core::schedule::dynacl_schedule;
use air_core::train::{pretrain, view_pairs, EpochMetrics};
use air_core::verify::{
    attack_checks, decomposition_check, equivalence_check, gradient_check, random_embeddings,
    TEMPERATURE,
};

const DECOMPOSITION_DRAWS: usize = 100;
const EQUIVALENCE_BATCHES: usize = 100;
const TABLE_TOL: f64 = 1e-6;
const GRADIENT_PARAM_LIMIT: usize = 1000;
const PGD_SAMPLES: usize = 1000;
const SCHEDULE_TOL: f64 = 1e-12;
const SMOKE_REDUCTION: f64 = 0.20;
const CALIBRATION_BATCHES: usize = 100;
const CALIBRATION_MIN_DIFFERENT: usize = 95;

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            out.pass = false;
            out.detail.push_str(&format!("; over the {:?} budget", b));
        }
    }
    println!(
        "criterion {id} {name}: {} ({}; {:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    out.pass
}

fn criterion_1() -> Outcome {
    let r = decomposition_check(&mut rng_for(101, &[]), DECOMPOSITION_DRAWS, false)
        .expect("decomposition");
    Outcome {
        pass: r.pass,
        detail: format!(
            "max |air - (term1 + term2)| / (1 + |air|) = {:.3e} <= {:.0e}",
            r.max_error, r.tolerance
        ),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = rng_for(102, &[]);
    let nat = equivalence_check(&mut rng, EQUIVALENCE_BATCHES, false).expect("natural");
    let adv = equivalence_check(&mut rng, EQUIVALENCE_BATCHES, true).expect("adversarial");
    Outcome {
        pass: nat.pass && adv.pass,
        detail: format!(
            "per-sample max error natural {:.3e}, adversarial {:.3e} <= {:.0e}",
            nat.max_error, adv.max_error, nat.tolerance
        ),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = rng_for(103, &[]);
    let mut definition_gap: f64 = 0.0;
    let mut sum_gap: f64 = 0.0;
    let mut negative = false;
    for i in 0..100 {
        let e = random_embeddings(&mut rng, [2, 4, 8][i % 3], [4, 16][i % 2]);
        let p = probability_table(&e, TableKind::YGivenX, ViewBranch::I, TEMPERATURE).unwrap();
        let q = probability_table(&e, TableKind::YGivenX, ViewBranch::J, TEMPERATURE).unwrap();
        definition_gap = definition_gap
            .max((sir_loss(&e, TEMPERATURE).unwrap() - kl_batch(&p, &q).unwrap()).abs());
        for kind in [
            TableKind::YGivenAdv,
            TableKind::AdvGivenX,
            TableKind::YGivenX,
        ] {
            for branch in [ViewBranch::I, ViewBranch::J] {
                let t = probability_table(&e, kind, branch, TEMPERATURE).unwrap();
                sum_gap = sum_gap.max((t.total() - 1.0).abs());
                negative |= t.values.iter().any(|&v| v < 0.0);
            }
        }
    }

    let blobs = ExperimentConfig::desk().resolved().unwrap();
    let data = blobs.train_set().unwrap().take(16);
    let encoder = Encoder::new(blobs.model.spec(data.descriptor.sample_shape()), 7).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (view, _) = view_pairs(&data, &idx, 1.0, 11, 0).unwrap();
    let adv = view.map(|v| (v + 0.01).min(1.0));
    let batch = ViewBatch::new(data.gather(&idx), view.clone(), view.clone())
        .unwrap()
        .with_adversarial(adv.clone(), adv)
        .unwrap();
    let e = batch.embed(&encoder).unwrap();
    let same_views = [
        sir_loss(&e, TEMPERATURE).unwrap(),
        air_loss(&e, TEMPERATURE).unwrap(),
    ];

    Outcome {
        pass: definition_gap == 0.0 && same_views == [0.0, 0.0] && sum_gap <= TABLE_TOL && !negative,
        detail: format!(
            "sir - kl_batch = {definition_gap:e}; sir, air at identical views = {:?}; max |sum - 1| = {sum_gap:.2e} <= {TABLE_TOL:.0e}",
            same_views
        ),
    }
}

fn criterion_4() -> Outcome {
    let params = Encoder::new(EncoderSpec::tiny(3, 6, 6), 0)
        .unwrap()
        .num_params();
    let records = gradient_check(104).expect("gradient check");
    let (r, plain) = (&records[0], &records[1]);
    Outcome {
        pass: r.pass && params <= GRADIENT_PARAM_LIMIT,
        detail: format!(
            "{params} parameters, max relative error {:.3e} <= {:.0e} (plain central difference {:.3e})",
            r.max_error, r.tolerance, plain.max_error
        ),
    }
}

fn criterion_5() -> Outcome {
    let records = attack_checks(105, PGD_SAMPLES).expect("attack checks");
    Outcome {
        pass: records.iter().all(|r| r.pass),
        detail: records
            .iter()
            .map(|r| format!("{} {:.2e}", r.check, r.max_error))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn criterion_6() -> Outcome {
    let (k, e, nu) = (50, 1000, 2.0 / 3.0);
    let expected = [(0, 1.0, 0.0), (500, 0.5, 1.0 / 3.0), (999, 0.05, 0.95 * nu)];
    let mut gap: f64 = 0.0;
    for (epoch, mu, omega) in expected {
        let (m, o) = dynacl_schedule(epoch, k, e, nu).unwrap();
        gap = gap.max((m - mu).abs()).max((o - omega).abs());
    }
    let series: Vec<(f64, f64)> = (0..e)
        .map(|i| dynacl_schedule(i, k, e, nu).unwrap())
        .collect();
    let monotone = series
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
    Outcome {
        pass: gap <= SCHEDULE_TOL && monotone,
        detail: format!(
            "max gap to (1,0), (0.5,1/3), (0.05,0.63333) = {gap:.1e}; monotone = {monotone}"
        ),
    }
}

fn criterion_7(history: &[EpochMetrics]) -> Outcome {
    let (first, last) = (&history[0], &history[history.len() - 1]);
    let reduction = 1.0 - last.total / first.total;
    let (reg0, reg1) = (first.sir + first.air, last.sir + last.air);
    Outcome {
        pass: history.len() == 20 && reduction >= SMOKE_REDUCTION && reg1 < reg0,
        detail: format!(
            "total {:.2} -> {:.2} ({:.1}% lower, need {:.0}%); sir+air {:.3e} -> {:.3e}",
            first.total,
            last.total,
            100.0 * reduction,
            100.0 * SMOKE_REDUCTION,
            reg0,
            reg1
        ),
    }
}

fn criterion_8(encoder: &Encoder, cfg: &ExperimentConfig) -> Outcome {
    let train = cfg.train_set().unwrap();
    let test = cfg.test_set().unwrap();
    let extractor = encoder.extractor_params();
    let mut frozen = true;
    let mut slf = None;
    for mode in [FinetuneMode::Slf, FinetuneMode::Alf] {
        let ft = FinetuneConfig {
            mode,
            epochs: if mode == FinetuneMode::Alf {
                2
            } else {
                cfg.finetune.epochs
            },
            ..cfg.finetune.clone()
        };
        let report = finetune(encoder, &train, &ft).unwrap();
        frozen &= report.classifier.encoder.extractor_params() == extractor;
        if mode == FinetuneMode::Slf {
            slf = Some(report.classifier);
        }
    }
    let clf = slf.unwrap();
    let standard = standard_accuracy(&clf, &test).unwrap();
    let zero = PgdConfig {
        eps: 0.0,
        ..PgdConfig::evaluation()
    };
    let robust = robust_accuracy(&clf, &test, &zero, 3).unwrap();
    let noise = |s| {
        corruption_accuracy(
            &clf,
            &test,
            CorruptionSpec::new(CorruptionKind::GaussianNoise, s).unwrap(),
            5,
        )
        .unwrap()
    };
    let (s1, s5) = (noise(1), noise(5));
    Outcome {
        pass: frozen && robust == standard && s5 <= s1,
        detail: format!(
            "extractor bit-identical after SLF/ALF = {frozen}; standard {standard:.4} vs robust(eps=0) {robust:.4}; gaussian_noise s1 {s1:.4} >= s5 {s5:.4}"
        ),
    }
}

fn criterion_9() -> Outcome {
    let mut rng = rng_for(109, &[]);
    let mut different = 0;
    let mut finite = true;
    for i in 0..CALIBRATION_BATCHES {
        let e = random_embeddings(&mut rng, [2, 4, 8][i % 3], [4, 16][i % 2]);
        let (a, u) = (
            air_loss(&e, TEMPERATURE).unwrap(),
            uncalibrated_air(&e, TEMPERATURE).unwrap(),
        );
        finite &= a.is_finite() && u.is_finite();
        different += usize::from(a != u);
    }
    Outcome {
        pass: finite && different >= CALIBRATION_MIN_DIFFERENT,
        detail: format!("finite = {finite}; differ on {different}/{CALIBRATION_BATCHES}, need {CALIBRATION_MIN_DIFFERENT}"),
    }
}

#[test]
fn acceptance() {
    let mut all = vec![
        line(
            1,
            "decomposition identity",
            Some(Duration::from_secs(10)),
            criterion_1,
        ),
        line(
            2,
            "contrastive/conditional equivalence",
            Some(Duration::from_secs(10)),
            criterion_2,
        ),
        line(3, "invariance regularizer definition", None, criterion_3),
        line(
            4,
            "gradient check",
            Some(Duration::from_secs(60)),
            criterion_4,
        ),
        line(5, "attack feasibility", None, criterion_5),
        line(6, "strength/weight schedule", None, criterion_6),
    ];

    let cfg = ExperimentConfig::desk().resolved().unwrap();
    let train = cfg.train_set().unwrap();
    let spec = cfg.model.spec(train.descriptor.sample_shape());
    assert_eq!(cfg.train.batch_size, 64);
    let mut encoder = None;
    all.push(line(
        7,
        "smoke training",
        Some(Duration::from_secs(600)),
        || {
            let report = pretrain(&train, &spec, &cfg.train, None, &mut |m| {
                eprintln!(
                    "  epoch {:>2} total {:.3} sir {:.3e} air {:.3e}",
                    m.epoch, m.total, m.sir, m.air
                )
            })
            .unwrap();
            let out = criterion_7(&report.metrics);
            encoder = Some(report.encoder);
            out
        },
    ));
    let encoder = encoder.unwrap();
    all.push(line(8, "protocol contracts", None, || {
        criterion_8(&encoder, &cfg)
    }));
    all.push(line(9, "calibration ablation", None, criterion_9));

    let failed: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
