mod common;

use approx::assert_abs_diff_eq;
use common::{naive_attention, naive_matmul, normals, rng, svd_oracle};
use transject::baseline::dot_product_attention;
use transject::ortho::{orthogonality_error, orthogonalize, OrthogonalParam};
use transject::spectral::{check_stochastic_eigenvalue, top_singular_value};
use transject::transject::orthogonal_attention;
use transject::Tensor;

#[test]
fn power_iteration_matches_dense_svd() {
    let r = &mut rng(1);
    for (rows, cols) in [(8, 8), (5, 12), (16, 3), (1, 9)] {
        let w = normals(r, rows * cols);
        let s1 = top_singular_value(&Tensor::new(w.clone(), &[rows, cols]).unwrap()).unwrap();
        assert_abs_diff_eq!(s1, svd_oracle(&w, rows, cols)[0], epsilon = 1e-6);
    }
}

#[test]
fn cayley_output_has_unit_singular_values() {
    let r = &mut rng(2);
    for d in [1, 4, 13] {
        let raw = normals(r, d * d);
        let q = orthogonalize(&Tensor::new(raw, &[d, d]).unwrap()).unwrap();
        for s in svd_oracle(q.data(), d, d) {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn matmul_layouts_match_naive_product() {
    let r = &mut rng(3);
    let (b, n, k, m) = (3, 5, 7, 4);
    let a = normals(r, b * n * k);
    let w = normals(r, k * m);
    let batched = normals(r, b * k * m);
    let shared = Tensor::new(a.clone(), &[b, n, k]).unwrap().matmul(&Tensor::new(w.clone(), &[k, m]).unwrap()).unwrap();
    let per = Tensor::new(a.clone(), &[b, n, k])
        .unwrap()
        .matmul(&Tensor::new(batched.clone(), &[b, k, m]).unwrap())
        .unwrap();
    for bi in 0..b {
        let lhs = &a[bi * n * k..(bi + 1) * n * k];
        let want = naive_matmul(lhs, &w, n, k, m);
        let want_b = naive_matmul(lhs, &batched[bi * k * m..(bi + 1) * k * m], n, k, m);
        for i in 0..n * m {
            assert_abs_diff_eq!(shared.data()[bi * n * m + i], want[i], epsilon = 1e-12);
            assert_abs_diff_eq!(per.data()[bi * n * m + i], want_b[i], epsilon = 1e-12);
        }
    }
}

#[test]
fn attention_matches_per_token_loop() {
    let r = &mut rng(4);
    let (n, d) = (6, 8);
    let x = normals(r, n * d);
    let ws: Vec<Vec<f64>> = (0..3).map(|_| normals(r, d * d)).collect();
    let eye = Tensor::eye(d);
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let t = |v: &[f64]| Tensor::new(v.to_vec(), &[d, d]).unwrap();
    let xt = Tensor::new(x.clone(), &[1, n, d]).unwrap();
    let got = dot_product_attention(&xt, &t(&ws[0]), &t(&ws[1]), &t(&ws[2]), &eye, 1, Some(&mask)).unwrap();
    let q = naive_matmul(&x, &ws[0], n, d, d);
    let k = naive_matmul(&x, &ws[1], n, d, d);
    let v = naive_matmul(&x, &ws[2], n, d, d);
    let want = naive_attention(&q, &k, &v, n, d, Some(&mask));
    for (g, w) in got.data().iter().zip(&want) {
        assert_abs_diff_eq!(g, w, epsilon = 1e-12);
    }
}

#[test]
fn orthogonal_attention_is_three_products() {
    let r = &mut rng(5);
    let (n, d) = (5, 6);
    let x = normals(r, n * d);
    let u = OrthogonalParam::random("u", d, 0.5, r).unwrap().matrix().unwrap();
    let v = OrthogonalParam::random("v", d, 0.5, r).unwrap().matrix().unwrap();
    let sigma: Vec<f64> = (0..d).map(|i| i as f64 / d as f64).collect();
    let got = orthogonal_attention(
        &Tensor::new(x.clone(), &[1, n, d]).unwrap(),
        &u,
        &v,
        &Tensor::new(sigma.clone(), &[1, d]).unwrap(),
    )
    .unwrap();
    let mut xu = naive_matmul(&x, u.data(), n, d, d);
    for (i, val) in xu.iter_mut().enumerate() {
        *val *= sigma[i % d];
    }
    let want = naive_matmul(&xu, v.data(), n, d, d);
    for (g, w) in got.data().iter().zip(&want) {
        assert_abs_diff_eq!(g, w, epsilon = 1e-12);
    }
    assert!(orthogonality_error(&u) < 1e-12);
}

#[test]
fn stochastic_matrix_has_unit_dominant_eigenvalue() {
    let r = &mut rng(6);
    let n = 7;
    let raw: Vec<f64> = normals(r, n * n).iter().map(|v| v.abs()).collect();
    let col_sums: Vec<f64> = (0..n).map(|c| (0..n).map(|row| raw[row * n + c]).sum()).collect();
    let m: Vec<f64> = raw.iter().enumerate().map(|(i, v)| v / col_sums[i % n]).collect();
    let lam = check_stochastic_eigenvalue(&Tensor::new(m, &[n, n]).unwrap()).unwrap();
    assert_abs_diff_eq!(lam, 1.0, epsilon = 1e-9);
}
