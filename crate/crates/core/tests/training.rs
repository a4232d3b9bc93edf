//! Small seed-fixed training runs on synthetic corpora.

use fair_rationale::data::{generate, Corpus, CorpusSpec, TokenRole};
use fair_rationale::debias::{train_debiased, BiasOracle, DebiasConfig, Variant};
use fair_rationale::numerics::Optimizer;
use fair_rationale::rationale::{
    train_ref, train_ref_on, Example, ModelConfig, MultiplierRule, RefModel, SparsityController, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::adam(3e-3),
        ..TrainConfig::new(epochs, seed)
    }
}

fn controller(target: f64) -> SparsityController {
    SparsityController {
        rule: MultiplierRule::Symmetric,
        ..SparsityController::new(target)
    }
}

fn small(corpus: &Corpus, classes: usize) -> ModelConfig {
    ModelConfig {
        emb_dim: 8,
        hidden: 8,
        ..ModelConfig::new(corpus.vocab.len(), classes)
    }
}

fn accuracy(model: &RefModel, data: &[Example], label: impl Fn(&Example) -> usize) -> f64 {
    let hits = data.iter().filter(|ex| model.predict(ex).unwrap().label == label(ex)).count();
    hits as f64 / data.len() as f64
}

/// Mean test-split `p_select` per role name.
fn role_p_select(model: &RefModel, corpus: &Corpus, role: &str) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ex in &corpus.test {
        let p = model.extract_gates(ex).unwrap().p_selects();
        for (i, &tok) in ex.tokens.iter().enumerate() {
            if corpus.roles.role(tok).map(TokenRole::name) == Some(role) {
                sum += p[i];
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn clean_spec() -> CorpusSpec {
    CorpusSpec {
        n_examples: 600,
        noise_rate: 0.0,
        bias_noise_rate: 0.0,
        reliability_spread: 0.0,
        task_carriers: 4,
        ent_carriers: 1,
        bias_carriers: 2,
        ..CorpusSpec::default()
    }
}

#[test]
fn planted_tokens_are_selected() {
    let corpus = generate(&clean_spec()).unwrap();
    let mut model = RefModel::new(ModelConfig::new(corpus.vocab.len(), 2), 7).unwrap();
    train_ref(&mut model, &corpus.train, &mut controller(0.5), &schedule(12, 1)).unwrap();
    let acc = accuracy(&model, &corpus.test, |e| e.task_label);
    let task = role_p_select(&model, &corpus, "TASK");
    let neut = role_p_select(&model, &corpus, "NEUT");
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(task >= 0.8, "TASK p_select {task}");
    assert!(neut <= 0.4, "NEUT p_select {neut}");
}

#[test]
fn bias_oracle_separates_bias_from_neutral_energy() {
    let corpus = generate(&clean_spec()).unwrap();
    let mut model = RefModel::new(ModelConfig::new(corpus.vocab.len(), 2), 3).unwrap();
    train_ref_on(&mut model, &corpus.train, &mut controller(0.5), &schedule(12, 2), |e| e.bias_label).unwrap();
    let oracle = BiasOracle::new(model);
    let (mut bias, mut neut) = ((0.0, 0usize), (0.0, 0usize));
    for ex in &corpus.test {
        let e = oracle.bias_energies(ex).unwrap();
        for (i, &tok) in ex.tokens.iter().enumerate() {
            match corpus.roles.role(tok) {
                Some(TokenRole::Bias(_)) => bias = (bias.0 + e[i], bias.1 + 1),
                Some(TokenRole::Neut) => neut = (neut.0 + e[i], neut.1 + 1),
                _ => {}
            }
        }
    }
    let gap = bias.0 / bias.1 as f64 - neut.0 / neut.1 as f64;
    assert!(gap >= 1.0, "energy gap {gap} nats");
}

#[test]
fn random_labels_give_chance_accuracy() {
    let mut corpus = generate(&CorpusSpec {
        n_examples: 500,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for ex in corpus.train.iter_mut().chain(corpus.test.iter_mut()) {
        ex.task_label = rng.gen_range(0..2);
    }
    let mut model = RefModel::new(small(&corpus, 2), 4).unwrap();
    train_ref(&mut model, &corpus.train, &mut controller(0.5), &schedule(5, 3)).unwrap();
    let acc = accuracy(&model, &corpus.test, |e| e.task_label);
    assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
}

#[test]
fn multiplier_loop_reaches_target() {
    let corpus = generate(&CorpusSpec {
        n_examples: 286,
        ..CorpusSpec::default()
    })
    .unwrap();
    assert_eq!(corpus.train.len(), 200);
    for target in [0.3, 0.7] {
        let mut model = RefModel::new(small(&corpus, 2), 5).unwrap();
        let mut cfg = schedule(10, 4);
        cfg.batch_size = 1;
        let report = train_ref(&mut model, &corpus.train, &mut controller(target), &cfg).unwrap();
        let ratio = report.final_selection_ratio();
        assert!((ratio - target).abs() <= 0.05, "target {target}: ratio {ratio} after 2000 steps");
    }
}

#[test]
fn large_fixed_multiplier_starves_the_classifier() {
    let corpus = generate(&CorpusSpec {
        n_examples: 500,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mut model = RefModel::new(small(&corpus, 2), 6).unwrap();
    let mut ctrl = SparsityController {
        mu: 100.0,
        step_size: 0.0,
        ..SparsityController::new(0.0)
    };
    let report = train_ref(&mut model, &corpus.train, &mut ctrl, &schedule(4, 5)).unwrap();
    assert!(report.final_selection_ratio() < 0.05, "{}", report.final_selection_ratio());
    let acc = accuracy(&model, &corpus.test, |e| e.task_label);
    assert!((0.35..=0.65).contains(&acc), "accuracy {acc}");
}

#[test]
fn unconstrained_debiasing_reduces_to_plain_training() {
    let corpus = generate(&CorpusSpec {
        n_examples: 100,
        ..CorpusSpec::default()
    })
    .unwrap();
    let oracle_model = RefModel::new(small(&corpus, 2), 1).unwrap();
    let before = oracle_model.params().checkpoint_bytes();
    let oracle = BiasOracle::new(oracle_model);
    let run = |variant: Option<(Variant, f64)>| {
        let mut m = RefModel::new(small(&corpus, 2), 2).unwrap();
        let mut ctrl = controller(0.5);
        let report = match variant {
            None => train_ref(&mut m, &corpus.train, &mut ctrl, &schedule(2, 9)).unwrap(),
            Some((v, gamma)) => {
                let dc = DebiasConfig::from_probability(0.5, gamma, v).unwrap();
                train_debiased(&mut m, &oracle, &corpus.train, &mut ctrl, &dc, &schedule(2, 9)).unwrap()
            }
        };
        (m.params().digest(), report)
    };
    let (plain_digest, plain) = run(None);
    let (none_digest, none) = run(Some((Variant::None, 1.0)));
    let (zero_digest, zero) = run(Some((Variant::Energy, 0.0)));
    let (active_digest, _) = run(Some((Variant::Energy, 1.0)));
    let losses = |r: &fair_rationale::rationale::TrainingReport| {
        r.epochs.iter().map(|e| (e.loss, e.accuracy, e.selection_ratio, e.mu)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&plain), losses(&none));
    assert_eq!(none.to_csv(), zero.to_csv());
    assert_eq!(plain_digest, none_digest);
    assert_eq!(none_digest, zero_digest);
    assert_ne!(none_digest, active_digest);
    assert_eq!(oracle.model().params().checkpoint_bytes(), before, "oracle must stay frozen");
}
