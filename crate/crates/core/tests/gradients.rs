//! Finite-difference checks of every differentiable primitive and of the
//! full training loss through the model.

mod common;

use common::{rng, uniform, weights};
use ncrf_core::model::{ModelConfig, ModelParams, ParamVars};
use ncrf_core::objectives::{coherence_on_tape, structural_alignment_on_tape};
use ncrf_core::tensor::{finite_difference_check_many, Tape, Tensor, Var, DEFAULT_FD_STEP};
use ncrf_core::tokenizer::{BOS, EOS, SEP};
use ncrf_core::training::sequence_loss;
use ncrf_core::Result;

const TOL: f64 = 1e-4;

/// Reduces any output to a scalar with fixed random weights so every
/// output coordinate contributes to the checked gradient.
fn reduce(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let w = weights(&mut rng(seed), n);
    tape.weighted_sum(x, &w)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let err = finite_difference_check_many(
        |tape, v| {
            let out = f(tape, v)?;
            reduce(tape, out, 99)
        },
        inputs,
        DEFAULT_FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn linear_ops() {
    let mut r = rng(1);
    let (a, b, c) = (uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2]), uniform(&mut r, &[3, 4]));
    check("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", &[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]));
    check("add", &[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", &[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", &[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]));
    check("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7));
    let bias = uniform(&mut r, &[4]);
    check("add_row", &[a.clone(), bias], |t, v| t.add_row(v[0], v[1]));
    let k = weights(&mut r, 12);
    check("add_const", std::slice::from_ref(&a), |t, v| t.add_const(v[0], &k));
    check("mul_const", std::slice::from_ref(&a), |t, v| t.mul_const(v[0], k.clone()));
    check("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
    check("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]));
    check("weighted_sum", &[a], |t, v| t.weighted_sum(v[0], &k));
}

#[test]
fn normalizing_ops() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[4, 5]);
    check("softmax_rows", std::slice::from_ref(&x), |t, v| t.softmax_rows(v[0]));
    let sq = uniform(&mut r, &[4, 4]);
    check("causal_softmax_rows", &[sq], |t, v| t.causal_softmax_rows(v[0]));
    check("log_softmax_pick", std::slice::from_ref(&x), |t, v| t.log_softmax_pick(v[0], &[0, 4, 2, 2]));
    check("softmax_entropy_rows", std::slice::from_ref(&x), |t, v| t.softmax_entropy_rows(v[0]));
    let (g, b) = (uniform(&mut r, &[5]), uniform(&mut r, &[5]));
    check("layer_norm", &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn elementwise_ops() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[3, 5]);
    check("gelu", std::slice::from_ref(&x), |t, v| t.gelu(v[0]));
    check("sigmoid", &[x], |t, v| t.sigmoid(v[0]));
}

#[test]
fn indexing_ops() {
    let mut r = rng(4);
    let (x, y) = (uniform(&mut r, &[4, 3]), uniform(&mut r, &[4, 2]));
    check("concat_cols", &[x.clone(), y], |t, v| t.concat_cols(&[v[0], v[1]]));
    check("slice_cols", std::slice::from_ref(&x), |t, v| t.slice_cols(v[0], 1, 2));
    check("gather_rows", std::slice::from_ref(&x), |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]));
    check("select_rows", std::slice::from_ref(&x), |t, v| t.select_rows(v[0], &[2, 2, 0]));
    check("mean_pool_rows", &[x], |t, v| t.mean_pool_rows(v[0], &[0..1, 1..4]));
}

#[test]
fn similarity_ops() {
    let mut r = rng(5);
    let (u, w) = (uniform(&mut r, &[6]), uniform(&mut r, &[6]));
    check("cosine", &[u.clone(), w], |t, v| t.cosine(v[0], v[1]));
    check("cosine self", &[u], |t, v| t.cosine(v[0], v[0]));
    let h = uniform(&mut r, &[5, 4]);
    check("adjacent_cosines", std::slice::from_ref(&h), |t, v| t.adjacent_cosines(v[0]));
    check("coherence", std::slice::from_ref(&h), |t, v| coherence_on_tape(t, v[0], Some(&[0.2, 1.0, 0.5, 0.9])));
    check("alignment loss", &[h], |t, v| structural_alignment_on_tape(t, v[0], None));
}

fn small_model() -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 50,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        max_len: 8,
    };
    let mut p = ModelParams::init(cfg, &mut rng(6)).unwrap();
    // Larger weights than the default init so every path carries signal.
    let mut r = rng(7);
    for t in p.tensors_mut() {
        if t.shape().len() == 2 {
            let u = uniform(&mut r, t.shape());
            for (v, x) in t.values_mut().iter_mut().zip(u.values()) {
                *v = 0.25 * x;
            }
        }
    }
    p
}

#[test]
fn full_training_loss() {
    let p = small_model();
    let cfg = *p.config();
    let tokens = [BOS, 17, 23, SEP, 41, 8, SEP, EOS];
    let inputs: Vec<Tensor> = p.tensors().to_vec();
    for lambda in [0.0, 0.5] {
        let err = finite_difference_check_many(
            |tape, vars| {
                let pv = ParamVars::from_vars(cfg, vars.to_vec())?;
                let (loss, _, _) = sequence_loss(tape, &pv, &tokens, lambda, None)?;
                Ok(loss)
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "lambda {lambda}: relative error {err:e}");
    }
}

#[test]
fn sentence_encoder_receives_gradient_only_through_alignment() {
    let p = small_model();
    let tokens = [BOS, 17, 23, SEP, 41, 8, SEP, EOS];
    let hier = p.names().iter().position(|n| n == "hier.query").unwrap();
    for (lambda, expect) in [(0.0, false), (0.5, true)] {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&p, &mut tape, true);
        let (loss, _, _) = sequence_loss(&mut tape, &pv, &tokens, lambda, None).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(pv.vars()[hier]);
        assert_eq!(g.is_some_and(|g| g.iter().any(|&x| x != 0.0)), expect);
    }
}
