use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semitaco::autodiff::{
    adam_step, grad_check, AdamConfig, AdamState, Gradients, Graph, ParameterSet, Tensor, Var,
};
use semitaco::{Error, Result};

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn check(params: &ParameterSet, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let names: Vec<String> = params.names().cloned().collect();
    grad_check(
        |ps: &ParameterSet| {
            let mut g = Graph::new();
            let vars: Vec<Var> = names.iter().map(|n| g.param(n, ps.get(n).unwrap(), true)).collect();
            let out = build(&mut g, &vars)?;
            let loss = project(&mut g, out, 99)?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        },
        params,
        1e-2,
        64,
    )
    .unwrap()
}

/// Parameters iterate in name order, so test names are prefixed to keep
/// their declaration order.
fn set(entries: Vec<(&str, Tensor)>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

#[test]
fn quadratic_closure_is_exact() {
    let p = set(vec![("x", Tensor::vector(vec![1.5, -2.0, 0.25]))]);
    let err = grad_check(
        |ps: &ParameterSet| {
            let mut g = Graph::new();
            let x = g.param("x", ps.get("x").unwrap(), true);
            let sq = g.mul(x, x)?;
            let s = g.sum(sq);
            let loss = g.affine(s, 3.0, 1.0);
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        },
        &p,
        1e-3,
        10,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = set(vec![
        ("a", uniform(&[3, 4], -1.0, 1.0, &mut rng)),
        ("b", uniform(&[4, 3], -1.0, 1.0, &mut rng)),
        ("c", uniform(&[3, 4], -1.0, 1.0, &mut rng)),
    ]);
    let err = check(&p, |g, v| {
        let ab = g.matmul(v[0], v[1])?;
        g.matmul(ab, v[2])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn nondeterministic_closure_is_detected() {
    let p = set(vec![("x", Tensor::scalar(1.0))]);
    let mut calls = 0.0;
    let res = grad_check(
        |ps: &ParameterSet| {
            calls += 1.0;
            let mut g = Graph::new();
            let x = g.param("x", ps.get("x").unwrap(), true);
            let y = g.affine(x, 1.0, calls);
            let v = g.value(y).item();
            Ok((v, g.backward(y)?))
        },
        &p,
        1e-3,
        1,
    );
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn elementwise_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set(vec![
            ("a_x", uniform(&[2, 3], -1.5, 1.5, &mut rng)),
            ("b_y", uniform(&[2, 3], -1.5, 1.5, &mut rng)),
            ("c_bias", uniform(&[3], -1.0, 1.0, &mut rng)),
            ("d_pos", uniform(&[2, 3], 0.2, 2.0, &mut rng)),
        ]);
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("add", Box::new(|g, v| g.add(v[0], v[1]))),
            ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
            ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
            ("broadcast add", Box::new(|g, v| g.add(v[0], v[2]))),
            ("broadcast mul", Box::new(|g, v| g.mul(v[0], v[2]))),
            ("affine", Box::new(|g, v| Ok(g.affine(v[0], -1.7, 0.3)))),
            ("div", Box::new(|g, v| Ok(g.div_scalar(v[0], 3.0)))),
            ("tanh", Box::new(|g, v| Ok(g.tanh(v[0])))),
            ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0])))),
            ("exp", Box::new(|g, v| Ok(g.exp(v[0])))),
            ("log", Box::new(|g, v| Ok(g.log(v[3])))),
            ("relu", Box::new(|g, v| Ok(g.relu(v[0])))),
            ("abs", Box::new(|g, v| Ok(g.abs(v[0])))),
            ("softplus", Box::new(|g, v| Ok(g.softplus(v[0])))),
            ("softmax", Box::new(|g, v| g.softmax(v[0], None))),
            ("masked softmax", Box::new(|g, v| g.softmax(v[0], Some(&[true, false, true, true, true, false])))),
            ("concat", Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
            ("slice", Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
            ("reshape", Box::new(|g, v| g.reshape(v[0], &[3, 2]))),
            ("sum", Box::new(|g, v| { let s = g.sum(v[0]); g.mul(s, s) })),
            ("mean", Box::new(|g, v| { let s = g.mean(v[0]); g.mul(s, s) })),
        ];
        for (name, op) in ops {
            let err = check(&p, op);
            prop_assert!(err < 1e-4, "{} {}", name, err);
        }
    }

    #[test]
    fn structured_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = set(vec![
            ("a", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng)),
            ("b", uniform(&[2, 4, 2], -1.0, 1.0, &mut rng)),
            ("c_table", uniform(&[5, 3], -1.0, 1.0, &mut rng)),
            ("d_alpha", uniform(&[2, 2], 0.2, 1.5, &mut rng)),
            ("e_beta", uniform(&[2, 2], 0.2, 1.5, &mut rng)),
            ("f_kappa", uniform(&[2, 2], 0.0, 4.0, &mut rng)),
            ("g_q", uniform(&[2, 3, 4], -1.0, 1.0, &mut rng)),
            ("h_k", uniform(&[2, 2, 4], -1.0, 1.0, &mut rng)),
            ("i_v", uniform(&[4], -1.0, 1.0, &mut rng)),
        ]);
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("bmm", Box::new(|g, v| g.bmm(v[0], v[1]))),
            ("gather", Box::new(|g, v| g.gather(v[2], &[4, 0, 4, 2]))),
            ("gmm weights", Box::new(|g, v| g.gmm_weights(v[3], v[4], v[5], 6))),
            ("additive scores", Box::new(|g, v| g.additive_scores(v[6], v[7], v[8]))),
        ];
        for (name, op) in ops {
            let err = check(&p, op);
            prop_assert!(err < 1e-4, "{} {}", name, err);
        }
    }
}

#[test]
fn optimizer_trajectories_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = set(vec![("w", uniform(&[3, 2], -1.0, 1.0, &mut rng))]);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..20 {
            let mut g = Graph::new();
            let w = g.param("w", params.get("w").unwrap(), true);
            let t = g.tanh(w);
            let loss = project(&mut g, t, 3).unwrap();
            let grads: Gradients = g.backward(loss).unwrap();
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        (params, state)
    };
    let (p1, s1) = run();
    let (p2, s2) = run();
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
    assert_eq!(s1.t, 20);
}
