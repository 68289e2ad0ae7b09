mod common;

use std::sync::Arc;

use cfgmoe::gradcheck::finite_diff_check;
use cfgmoe::tape::Index;
use cfgmoe::{Result, Tape, Tensor, Var};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tensor(r: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts an op's output with a fixed random tensor so every output
/// element contributes to the checked scalar.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let [rows, cols] = tape.value(out).shape();
    let c = tensor(&mut rng(seed), rows, cols, -1.0, 1.0);
    let c = tape.constant(c);
    let prod = tape.mul(out, c)?;
    Ok(tape.sum_all(prod))
}

fn check<F>(point: &[Tensor], seed: u64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(
        |tape, v| {
            let out = f(tape, v)?;
            contract(tape, out, seed)
        },
        point,
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

fn index(v: &[usize]) -> Index {
    Arc::from(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_ops(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut r = rng(seed);
        let a = tensor(&mut r, rows, cols, -2.0, 2.0);
        let b = tensor(&mut r, rows, cols, -2.0, 2.0);
        let pos = tensor(&mut r, rows, 1, 0.5, 2.0);
        let row = tensor(&mut r, 1, cols, -1.0, 1.0);
        check(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]));
        check(&[a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]));
        check(&[a.clone(), b.clone()], seed, |t, v| t.mul(v[0], v[1]));
        check(&[a.clone(), row], seed, |t, v| t.add_row(v[0], v[1]));
        check(&[a.clone(), pos.clone()], seed, |t, v| t.mul_col(v[0], v[1]));
        check(&[a, pos], seed, |t, v| t.div_col(v[0], v[1]));
    }

    #[test]
    fn matmul(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let a = tensor(&mut r, m, k, -1.0, 1.0);
        let b = tensor(&mut r, k, n, -1.0, 1.0);
        check(&[a, b], seed, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn unary_ops(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut r = rng(seed);
        let a = tensor(&mut r, rows, cols, -2.0, 2.0);
        let pos = tensor(&mut r, rows, cols, 0.2, 3.0);
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.scale(v[0], -1.7)));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.add_scalar(v[0], 0.3)));
        check(std::slice::from_ref(&pos), seed, |t, v| Ok(t.sqrt(v[0])));
        check(std::slice::from_ref(&pos), seed, |t, v| Ok(t.log(v[0])));
        check(std::slice::from_ref(&pos), seed, |t, v| Ok(t.recip(v[0])));
        check(&[pos], seed, |t, v| Ok(t.xlogx(v[0])));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.softmax_rows(v[0])));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.log_softmax_rows(v[0])));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.sum_rows(v[0])));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.sum_cols(v[0])));
        check(std::slice::from_ref(&a), seed, |t, v| Ok(t.sum_all(v[0])));
        check(&[a], seed, |t, v| t.dropout(v[0], 0.4, seed));
    }

    #[test]
    fn relu_away_from_kink(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::new(3, 3, (0..9).map(|_| {
            let m = r.random_range(0.1..2.0);
            if r.random_bool(0.5) { m } else { -m }
        }).collect()).unwrap();
        check(&[a], seed, |t, v| Ok(t.relu(v[0])));
    }

    #[test]
    fn shape_ops(seed in any::<u64>(), rows in 1usize..5) {
        let mut r = rng(seed);
        let a = tensor(&mut r, rows, 3, -1.0, 1.0);
        let b = tensor(&mut r, rows, 2, -1.0, 1.0);
        let c = tensor(&mut r, 2, 3, -1.0, 1.0);
        check(&[a.clone(), b], seed, |t, v| t.concat_cols(&[v[0], v[1]]));
        check(&[a.clone(), c], seed, |t, v| t.concat_rows(&[v[0], v[1]]));
        check(std::slice::from_ref(&a), seed, |t, v| t.slice_cols(v[0], 1, 2));
        let idx: Vec<usize> = (0..7).map(|_| r.random_range(0..rows)).collect();
        let idx = index(&idx);
        check(&[a], seed, |t, v| t.gather_rows(v[0], &idx));
    }

    #[test]
    fn segment_ops(seed in any::<u64>(), items in 1usize..9, segs in 1usize..4) {
        let mut r = rng(seed);
        let seg: Vec<usize> = (0..items).map(|_| r.random_range(0..segs)).collect();
        let seg = index(&seg);
        let a = tensor(&mut r, items, 2, -2.0, 2.0);
        check(std::slice::from_ref(&a), seed, |t, v| t.segment_sum(v[0], &seg, segs));
        check(std::slice::from_ref(&a), seed, |t, v| t.segment_prod(v[0], &seg, segs));
        // distinct values keep the argmax away from ties
        let spread = Tensor::new(items, 2, (0..items * 2).map(|k| k as f64 * 0.37 - 1.0).collect()).unwrap();
        check(&[spread], seed, |t, v| t.segment_max(v[0], &seg, segs));
    }

    #[test]
    fn composite_expression(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = tensor(&mut r, 4, 3, -1.0, 1.0);
        let w = tensor(&mut r, 3, 2, -1.0, 1.0);
        check(&[x, w], seed, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let s = t.log_softmax_rows(h);
            let sq = t.mul(s, s)?;
            let z = t.add_scalar(sq, 1.0);
            Ok(t.sqrt(z))
        });
    }
}

#[test]
fn div_col_is_exact_for_self_normalisation() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[[0.3, 0.0], [0.5, 1.5]]).unwrap());
    let total = tape.sum_cols(p);
    let q = tape.div_col(p, total).unwrap();
    assert_eq!(tape.value(q).data(), &[1.0, 0.0, 0.25, 0.75]);
}
