//! Closed-form gate quantities against Monte-Carlo frequencies.

use fair_rationale::gates::{GateVector, KumaGate, Stretch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 1_000_000;

struct Moments {
    zero: f64,
    one: f64,
    mean: f64,
}

fn monte_carlo(gate: &KumaGate, seed: u64) -> Moments {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut zero, mut one, mut sum) = (0usize, 0usize, 0.0);
    for _ in 0..SAMPLES {
        let z = gate.sample(rng.gen());
        zero += (z == 0.0) as usize;
        one += (z == 1.0) as usize;
        sum += z;
    }
    let n = SAMPLES as f64;
    Moments {
        zero: zero as f64 / n,
        one: one as f64 / n,
        mean: sum / n,
    }
}

#[test]
fn point_masses_match_sampling() {
    let stretch = Stretch::new(-0.1, 1.1).unwrap();
    let g = KumaGate::with_stretch(0.5, 2.0, stretch);
    let mc = monte_carlo(&g, 11);
    assert!((mc.zero - g.p_zero()).abs() <= 0.002, "{} vs {}", mc.zero, g.p_zero());
    assert!((mc.one - g.p_one()).abs() <= 0.002, "{} vs {}", mc.one, g.p_one());
    assert!((mc.mean - g.expected_value()).abs() <= 0.003);
}

#[test]
fn expected_value_matches_sampling_across_shapes() {
    for (i, (a, b)) in [(0.3, 0.3), (1.0, 1.0), (2.0, 0.5), (5.0, 3.0), (0.2, 8.0)].into_iter().enumerate() {
        let g = KumaGate::new(a, b);
        let mc = monte_carlo(&g, 20 + i as u64);
        assert!((mc.mean - g.expected_value()).abs() <= 0.003, "a={a} b={b}");
        assert!(g.p_zero() + g.p_one() <= 1.0 + 1e-12);
    }
}

#[test]
fn expected_l0_matches_mean_nonzero_count() {
    let gates: Vec<KumaGate> = [(0.4, 1.0), (1.0, 1.0), (3.0, 0.7), (0.8, 4.0), (2.0, 2.0), (0.2, 0.2)]
        .into_iter()
        .map(|(a, b)| KumaGate::new(a, b))
        .collect();
    let gv = GateVector::new(gates.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 200_000;
    let mut nonzero = 0usize;
    for _ in 0..draws {
        nonzero += gates.iter().filter(|g| g.sample(rng.gen()) != 0.0).count();
    }
    let mc = nonzero as f64 / draws as f64;
    assert!((mc - gv.expected_l0()).abs() <= 0.01 * gates.len() as f64);
}
