use std::rc::Rc;

use super::*;
use crate::oracle::{check_gradients, FdConfig};
use crate::rng::Rng;

const CASES: u64 = 20;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

fn positive_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.uniform_vec(n, 0.5, 2.0)).unwrap()
}

fn dim(rng: &mut Rng, lo: i64, hi: i64) -> usize {
    rng.int_range(lo, hi) as usize
}

/// Runs `f` through the gradient checker for `CASES` random draws.
fn fd_cases<I, F>(name: &str, mut make_inputs: I, f: F)
where
    I: FnMut(&mut Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for seed in 0..CASES {
        let mut rng = Rng::new(1000 + seed);
        let inputs = make_inputs(&mut rng);
        let report = check_gradients(&inputs, &f, &FdConfig::default(), seed).unwrap();
        assert!(
            report.passed,
            "{name} seed {seed}: max rel err {:.3e} (abs {:.3e})",
            report.max_rel_err,
            report.max_abs_err
        );
    }
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let g = tape.backward(&x.sum()).unwrap();
    assert_eq!(g.wrt(&x).unwrap(), &Tensor::ones(&[2, 3]));
}

#[test]
fn square_sum_gradient_is_2x() {
    let tape = Tape::new();
    let v = Tensor::new(vec![4], vec![1., -2., 0.5, 3.]).unwrap();
    let x = tape.leaf(v.clone());
    let loss = x.mul(&x).unwrap().sum();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&x).unwrap(), &v.scale(2.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    let err = tape.backward(&x).err().unwrap();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn shared_input_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.wrt(&x).unwrap().item(), 7.0);
}

#[test]
fn no_grad_tape_records_nothing() {
    let tape = Tape::no_grad();
    let x = tape.leaf(Tensor::ones(&[2]));
    let y = x.exp().sum();
    assert!(tape.is_empty());
    assert!(!y.is_tracked());
}

#[test]
fn softmax_examples() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    for v in x.softmax(0).unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let s = big.softmax(0).unwrap();
    assert!(s.value().is_finite());
    assert!((s.value().data()[0] - 1.0).abs() < 1e-15);
    let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = x.softmax(0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in s.value().data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
    let nan = tape.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(nan.softmax(0), Err(crate::Error::Numeric { .. })));
}

#[test]
fn softmax_sums_to_one_on_inner_axis() {
    let mut rng = Rng::new(3);
    let tape = Tape::no_grad();
    let x = tape.constant(rand_tensor(&mut rng, &[3, 5, 4]));
    let s = x.softmax(1).unwrap();
    let sums = s.value().sum_axis(1).unwrap();
    for v in sums.data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn topk_ties_go_to_lower_index() {
    assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
    assert_eq!(top_k_indices(&[5.0, 5.0, 5.0], 1), vec![0]);
    assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![1, 0]);
}

#[test]
fn fd_matmul() {
    fd_cases(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 6), dim(r, 1, 5));
            if r.uniform() < 0.5 {
                let b = dim(r, 1, 3);
                vec![rand_tensor(r, &[b, m, k]), rand_tensor(r, &[b, k, n])]
            } else {
                vec![rand_tensor(r, &[2, m, k]), rand_tensor(r, &[k, n])]
            }
        },
        |_, x| x[0].matmul(&x[1]),
    );
}

#[test]
fn fd_elementwise_binary() {
    fd_cases(
        "add/sub/mul/div with broadcasting",
        |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            vec![rand_tensor(r, &[a, b]), positive_tensor(r, &[1, b]), rand_tensor(r, &[a, 1])]
        },
        |_, x| {
            let s = x[0].add(&x[1])?.mul(&x[2])?;
            s.sub(&x[2])?.div(&x[1])
        },
    );
}

#[test]
fn fd_softmax() {
    fd_cases(
        "softmax",
        |r| {
            let shape = [dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 4)];
            vec![rand_tensor(r, &shape)]
        },
        |_, x| {
            let a = x[0].softmax(2)?;
            let b = x[0].softmax(1)?;
            a.add(&b)
        },
    );
}

#[test]
fn fd_unary() {
    fd_cases(
        "unary",
        |r| {
            let (a, b) = (dim(r, 1, 6), dim(r, 1, 6));
            vec![rand_tensor(r, &[a]), positive_tensor(r, &[b])]
        },
        |_, x| {
            let a = Var::concat(
                &[&x[0].sigmoid(), &x[0].tanh(), &x[0].gelu(), &x[0].softplus(), &x[0].exp(), &x[0].square()],
                0,
            )?;
            let b = Var::concat(&[&x[1].ln(), &x[1].sqrt(), &x[1].xlogx(), &x[1].neg().add_scalar(0.5)], 0)?;
            Var::concat(&[&a, &b.scale(1.5)], 0)
        },
    );
}

#[test]
fn fd_l2_normalize() {
    fd_cases(
        "l2_normalize",
        |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 7)];
            vec![rand_tensor(r, &s)]
        },
        |_, x| Ok(x[0].l2_normalize(1e-12)),
    );
}

#[test]
fn fd_gather_scatter() {
    fd_cases(
        "gather/scatter",
        |r| {
            let rows = dim(r, 2, 6);
            let w = dim(r, 1, 4);
            vec![rand_tensor(r, &[rows, w])]
        },
        |_, x| {
            let rows = x[0].shape()[0];
            let idx: Vec<usize> = (0..rows + 2).map(|i| (i * 7 + 1) % rows).collect();
            let g = x[0].gather_rows(Rc::new(idx.clone()))?;
            let back: Vec<usize> = (0..idx.len()).map(|i| (i * 3) % (rows + 1)).collect();
            g.square().scatter_add_rows(Rc::new(back), rows + 1)
        },
    );
}

#[test]
fn fd_shape_ops() {
    fd_cases(
        "reshape/permute/transpose/narrow/concat/broadcast",
        |r| {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 2, 4), dim(r, 1, 3));
            vec![rand_tensor(r, &[a, b, c])]
        },
        |_, x| {
            let s = x[0].shape().to_vec();
            let p = x[0].permute(&[2, 0, 1])?.reshape(&[s[2], s[0] * s[1]])?.transpose()?;
            let n = x[0].narrow(1, 1, s[1] - 1)?;
            let bc = x[0].narrow(0, 0, 1)?.broadcast_to(&[2, s[1], s[2]])?;
            let joined = Var::concat(&[&n, &x[0].square()], 1)?;
            Var::concat(&[&p.reshape(&[s.iter().product()])?, &joined.reshape(&[joined.value().len()])?, &bc.reshape(&[bc.value().len()])?], 0)
        },
    );
}

#[test]
fn fd_reductions() {
    fd_cases(
        "sum/mean/max",
        |r| {
            let s = [dim(r, 1, 4), dim(r, 2, 5)];
            vec![rand_tensor(r, &s)]
        },
        |_, x| {
            let a = x[0].sum_axis(1)?;
            let b = x[0].mean_axis(0)?;
            let c = x[0].max_axis(1)?;
            let d = x[0].mean().reshape(&[1])?;
            let e = x[0].sum().reshape(&[1])?;
            Var::concat(&[&a, &b, &c, &d, &e], 0)
        },
    );
}

#[test]
fn fd_topk_mask() {
    fd_cases(
        "topk_mask",
        |r| {
            let s = [dim(r, 1, 3), dim(r, 3, 8)];
            vec![rand_tensor(r, &s)]
        },
        |_, x| Ok(x[0].topk_mask(2).square()),
    );
}

#[test]
fn fd_conv3d() {
    fd_cases(
        "conv3d",
        |r| {
            let (cin, cout) = (dim(r, 1, 2), dim(r, 1, 2));
            let (d, h, w) = (dim(r, 1, 3), dim(r, 2, 4), dim(r, 2, 4));
            let k = if r.uniform() < 0.5 { 1 } else { 3 };
            vec![
                rand_tensor(r, &[2, cin, d, h, w]),
                rand_tensor(r, &[cout, cin, k, k, k]),
                rand_tensor(r, &[cout]),
            ]
        },
        |_, x| x[0].conv3d(&x[1], Some(&x[2])),
    );
}

#[test]
fn fd_axial_depthwise() {
    fd_cases(
        "axial_depthwise",
        |r| {
            let p = dim(r, 1, 3);
            let c = dim(r, 1, 2);
            vec![rand_tensor(r, &[1, c, 2 * p, 2, 3]), rand_tensor(r, &[c, p])]
        },
        |_, x| x[0].axial_depthwise(&x[1]),
    );
}

#[test]
fn fd_indexed_attention() {
    fd_cases(
        "indexed_attention",
        |r| {
            let (g, nq, nk, d) = (dim(r, 1, 2), 2 * dim(r, 1, 3), dim(r, 2, 5), dim(r, 1, 4));
            vec![rand_tensor(r, &[g, nq, d]), rand_tensor(r, &[g, nk, d]), rand_tensor(r, &[g, nk, d + 1])]
        },
        |_, x| {
            let (nq, nk) = (x[0].shape()[1], x[1].shape()[1]);
            let dense = indexed_attention(&x[0], &x[1], &x[2], &KeySets::All, 0.7, None)?;
            let period = nq / 2;
            let idx: Vec<u32> = (0..period * 3).map(|i| ((i * 5 + 2) % nk) as u32).collect();
            let keys = KeySets::Rows { width: 3, per_group: false, idx: Rc::new(idx) };
            let sparse = indexed_attention(&x[0], &x[1], &x[2], &keys, 1.3, None)?;
            let offsets: Vec<usize> = (0..=period).map(|i| i * (i + 1) / 2).collect();
            let ragged_idx: Vec<u32> = (0..offsets[period]).map(|i| ((i * 3 + 1) % nk) as u32).collect();
            let ragged = KeySets::Ragged { offsets: Rc::new(offsets), idx: Rc::new(ragged_idx) };
            let r = indexed_attention(&x[0], &x[1], &x[2], &ragged, 0.9, None)?;
            dense.add(&sparse)?.add(&r)
        },
    );
}

#[test]
fn indexed_attention_matches_direct_softmax() {
    let mut rng = Rng::new(11);
    let tape = Tape::no_grad();
    let q = tape.constant(rand_tensor(&mut rng, &[1, 4, 3]));
    let k = tape.constant(rand_tensor(&mut rng, &[1, 5, 3]));
    let v = tape.constant(rand_tensor(&mut rng, &[1, 5, 2]));
    let counter = AttnCounter::new();
    let out = indexed_attention(&q, &k, &v, &KeySets::All, 0.5, Some(&counter)).unwrap();
    let reference = q
        .matmul(&k.transpose().unwrap())
        .unwrap()
        .scale(0.5)
        .softmax(2)
        .unwrap()
        .matmul(&v)
        .unwrap();
    assert!(out.value().max_abs_diff(reference.value()) < 1e-14);
    assert_eq!(counter.pairs(), 20);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(5);
        let tape = Tape::no_grad();
        let a = tape.constant(rand_tensor(&mut rng, &[7, 9]));
        let b = tape.constant(rand_tensor(&mut rng, &[9, 4]));
        a.matmul(&b).unwrap().softmax(1).unwrap().value().clone()
    };
    assert_eq!(run().data(), run().data());
}
