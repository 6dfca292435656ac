//! Dense matrix products (2-D and batched 3-D).

use crate::nn::ops::basic::emit;
use crate::nn::tape::{Arr, Var};
use ndarray::{Array2, ArrayView2, Axis, Ix2, Ix3};

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

/// `[N, K] · [K, M] → [N, M]`.
pub fn matmul(a: &Var, b: &Var) -> Var {
    let (asz, bsz) = (a.shape(), b.shape());
    assert!(
        asz.len() == 2 && bsz.len() == 2 && asz[1] == bsz[0],
        "matmul: {:?} · {:?}",
        asz,
        bsz
    );
    let out = as2(a.value()).dot(&as2(b.value())).into_dyn();
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        let g2 = as2(g);
        sink.add_to(ai, || g2.dot(&as2(&bv).t()).into_dyn());
        sink.add_to(bi, || as2(&av).t().dot(&g2).into_dyn());
    })
}

/// `[N, K] · [M, K]ᵀ → [N, M]`.
pub fn matmul_nt(a: &Var, b: &Var) -> Var {
    let (asz, bsz) = (a.shape(), b.shape());
    assert!(
        asz.len() == 2 && bsz.len() == 2 && asz[1] == bsz[1],
        "matmul_nt: {:?} · {:?}ᵀ",
        asz,
        bsz
    );
    let out = as2(a.value()).dot(&as2(b.value()).t()).into_dyn();
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        let g2 = as2(g);
        sink.add_to(ai, || g2.dot(&as2(&bv)).into_dyn());
        sink.add_to(bi, || g2.t().dot(&as2(&av)).into_dyn());
    })
}

fn bmm_values(a: &Arr, b: &Arr, transpose_b: bool) -> Arr {
    let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
    let bsz = a3.dim().0;
    let n = a3.dim().1;
    let m = if transpose_b { b3.dim().1 } else { b3.dim().2 };
    let mut out = ndarray::Array3::<f64>::zeros((bsz, n, m));
    for i in 0..bsz {
        let prod: Array2<f64> = if transpose_b {
            a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t())
        } else {
            a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i))
        };
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out.into_dyn()
}

/// Batched `[B, N, K] · [B, K, M] → [B, N, M]`.
pub fn bmm(a: &Var, b: &Var) -> Var {
    let (asz, bsz) = (a.shape(), b.shape());
    assert!(
        asz.len() == 3 && bsz.len() == 3 && asz[0] == bsz[0] && asz[2] == bsz[1],
        "bmm: {:?} · {:?}",
        asz,
        bsz
    );
    let out = bmm_values(a.value(), b.value(), false);
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        // dA[i] = G[i] · B[i]ᵀ ; dB[i] = A[i]ᵀ · G[i]
        sink.add_to(ai, || {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
            let mut ga = ndarray::Array3::<f64>::zeros((g3.dim().0, g3.dim().1, b3.dim().1));
            for i in 0..g3.dim().0 {
                ga.index_axis_mut(Axis(0), i)
                    .assign(&g3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t()));
            }
            ga.into_dyn()
        });
        sink.add_to(bi, || {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
            let mut gb = ndarray::Array3::<f64>::zeros((g3.dim().0, a3.dim().2, g3.dim().2));
            for i in 0..g3.dim().0 {
                gb.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).t().dot(&g3.index_axis(Axis(0), i)));
            }
            gb.into_dyn()
        });
    })
}

/// Batched `[B, N, K] · [B, M, K]ᵀ → [B, N, M]` (attention scores).
pub fn bmm_nt(a: &Var, b: &Var) -> Var {
    let (asz, bsz) = (a.shape(), b.shape());
    assert!(
        asz.len() == 3 && bsz.len() == 3 && asz[0] == bsz[0] && asz[2] == bsz[2],
        "bmm_nt: {:?} · {:?}ᵀ",
        asz,
        bsz
    );
    let out = bmm_values(a.value(), b.value(), true);
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        // dA[i] = G[i] · B[i] ; dB[i] = G[i]ᵀ · A[i]
        sink.add_to(ai, || {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
            let mut ga = ndarray::Array3::<f64>::zeros((g3.dim().0, g3.dim().1, b3.dim().2));
            for i in 0..g3.dim().0 {
                ga.index_axis_mut(Axis(0), i)
                    .assign(&g3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
            }
            ga.into_dyn()
        });
        sink.add_to(bi, || {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
            let mut gb = ndarray::Array3::<f64>::zeros((g3.dim().0, g3.dim().2, a3.dim().2));
            for i in 0..g3.dim().0 {
                gb.index_axis_mut(Axis(0), i)
                    .assign(&g3.index_axis(Axis(0), i).t().dot(&a3.index_axis(Axis(0), i)));
            }
            gb.into_dyn()
        });
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_scalar_fn, GRAD_REL_TOL};
    use crate::nn::ops::basic::{mul, sum_all};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[4, 2]);
        let err = check_scalar_fn(&[a, b], &|_t, vs| {
            let p = matmul(&vs[0], &vs[1]); // [3,2]
            sum_all(&mul(&p, &p))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = rand_arr(&mut rng, &[3, 5]);
        let b = rand_arr(&mut rng, &[4, 5]);
        let err = check_scalar_fn(&[a, b], &|_t, vs| {
            let p = matmul_nt(&vs[0], &vs[1]); // [3,4]
            sum_all(&mul(&p, &p))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn bmm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = rand_arr(&mut rng, &[2, 3, 4]);
        let b = rand_arr(&mut rng, &[2, 4, 2]);
        let err = check_scalar_fn(&[a, b], &|_t, vs| {
            let p = bmm(&vs[0], &vs[1]);
            sum_all(&mul(&p, &p))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn bmm_nt_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = rand_arr(&mut rng, &[2, 3, 4]);
        let b = rand_arr(&mut rng, &[2, 5, 4]);
        let err = check_scalar_fn(&[a, b], &|_t, vs| {
            let p = bmm_nt(&vs[0], &vs[1]);
            sum_all(&mul(&p, &p))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }
}
