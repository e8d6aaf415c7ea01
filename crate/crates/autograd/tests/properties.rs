use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfuse_autograd::ops::conv::{conv, conv_input_grad};
use voxfuse_autograd::{ConvGeom, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn geometry() -> impl Strategy<Value = ConvGeom> {
    (1usize..4, 1usize..3, 0usize..2, 3usize..7).prop_filter_map("valid geometry", |(k, s, p, n)| {
        ConvGeom::forward([n, n + 1, n.saturating_sub(1).max(1)], [k, k, 1], [s, s, 1], [p.min(k - 1), p.min(k - 1), 0])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// `<conv(x, w), g> == <x, conv_input_grad(g, w)>`.
    #[test]
    fn transposed_convolution_is_the_adjoint(g in geometry(), ci in 1usize..3, co in 1usize..3, seed in any::<u64>()) {
        let [dz, dy, dx] = g.in_size;
        let [oz, oy, ox] = g.out_size;
        let x = random(&[2, ci, dz, dy, dx], seed);
        let w = Var::constant(random(&[co, ci, g.kernel[0], g.kernel[1], g.kernel[2]], seed ^ 1));
        let gy = random(&[2, co, oz, oy, ox], seed ^ 2);
        let y = conv(&Var::constant(x.clone()), &w, &g);
        let xt = conv_input_grad(&Var::constant(gy.clone()), &w, &g);
        let (l, r) = (dot(y.value(), &gy), dot(&x, xt.value()));
        prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(1.0), "{} vs {}", l, r);
    }

    /// A batch equals its samples run one at a time.
    #[test]
    fn batches_match_single_samples(g in geometry(), n in 1usize..4, seed in any::<u64>()) {
        let [dz, dy, dx] = g.in_size;
        let x = random(&[n, 2, dz, dy, dx], seed);
        let w = Var::constant(random(&[3, 2, g.kernel[0], g.kernel[1], g.kernel[2]], seed ^ 3));
        let all = conv(&Var::constant(x.clone()), &w, &g);
        let per = x.len() / n;
        let out = all.value().len() / n;
        for i in 0..n {
            let xi = Tensor::from_vec(&[1, 2, dz, dy, dx], x.data()[i * per..(i + 1) * per].to_vec());
            let yi = conv(&Var::constant(xi), &w, &g);
            prop_assert_eq!(yi.value().data(), &all.value().data()[i * out..(i + 1) * out]);
        }
    }

    #[test]
    fn permutation_round_trips(seed in any::<u64>(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let x = Var::constant(random(&[2, 3, 4, 5], seed));
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = x.permute(&perm).permute(&inv);
        prop_assert_eq!(back.value(), x.value());
    }
}
