use uvpaint_nn::gradcheck::{check_input, check_params, probe_loss, probe_weights};
use uvpaint_nn::{act, init_rng, Conv2d, GroupNorm, Linear, Module, ResBlock, SelfAttention, Tensor};

const TOL: f64 = 1e-3;

fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::from_vec(c, h, w, probe_weights(c * h * w, seed))
}

fn assert_reports(what: &str, reports: &[uvpaint_nn::gradcheck::GradReport]) {
    for r in reports {
        assert!(r.rel_err < TOL, "{what}/{}: rel err {:.2e} (fd norm {:.2e})", r.name, r.rel_err, r.fd_norm);
    }
}

#[test]
fn conv_gradients() {
    let mut rng = init_rng(1);
    for (k, s) in [(3, 1), (3, 2), (1, 1)] {
        let x = input(3, 6, 8, 10);
        let mut conv = Conv2d::new(3, 4, k, s, &mut rng);
        conv.bias.value = probe_weights(4, 5);
        let (ho, wo) = conv.out_size(6, 8);
        let r = probe_weights(4 * ho * wo, 11);
        let reports = check_params(
            &mut conv,
            1e-2,
            40,
            &|m: &Conv2d| probe_loss(&m.apply(&x), &r),
            &|m: &mut Conv2d| {
                m.zero_grad();
                let (_, c) = m.forward(&x);
                m.backward(&c, &Tensor::from_vec(4, ho, wo, r.clone()));
            },
        );
        assert_reports("conv", &reports);

        let (_, c) = conv.forward(&x);
        let dx = conv.clone().backward(&c, &Tensor::from_vec(4, ho, wo, r.clone()));
        let err = check_input(&x, &dx, 1e-2, 60, &|xx| probe_loss(&conv.apply(xx), &r));
        assert!(err < TOL, "conv k={k} s={s} input grad rel err {err:.2e}");
    }
}

#[test]
fn group_norm_gradients() {
    let x = input(8, 4, 4, 20);
    let mut gn = GroupNorm::new(4, 8);
    gn.gamma.value = probe_weights(8, 21).iter().map(|v| 1.0 + v).collect();
    gn.beta.value = probe_weights(8, 22);
    let r = probe_weights(8 * 16, 23);
    let reports = check_params(
        &mut gn,
        1e-2,
        8,
        &|m: &GroupNorm| probe_loss(&m.forward(&x).0, &r),
        &|m: &mut GroupNorm| {
            m.zero_grad();
            let (_, c) = m.forward(&x);
            m.backward(&c, &Tensor::from_vec(8, 4, 4, r.clone()));
        },
    );
    assert_reports("groupnorm", &reports);
    let (_, c) = gn.forward(&x);
    let dx = gn.clone().backward(&c, &Tensor::from_vec(8, 4, 4, r.clone()));
    let err = check_input(&x, &dx, 1e-2, 64, &|xx| probe_loss(&gn.forward(xx).0, &r));
    assert!(err < TOL, "groupnorm input grad rel err {err:.2e}");
}

#[test]
fn attention_gradients() {
    let mut rng = init_rng(3);
    let x = input(8, 3, 4, 30);
    let mut attn = SelfAttention::new(8, 2, 4, &mut rng);
    let r = probe_weights(8 * 12, 31);
    let reports = check_params(
        &mut attn,
        1e-2,
        30,
        &|m: &SelfAttention| probe_loss(&m.forward(&x).0, &r),
        &|m: &mut SelfAttention| {
            m.zero_grad();
            let (_, c) = m.forward(&x);
            m.backward(&c, &Tensor::from_vec(8, 3, 4, r.clone()));
        },
    );
    assert_reports("attention", &reports);
    let (_, c) = attn.forward(&x);
    let dx = attn.clone().backward(&c, &Tensor::from_vec(8, 3, 4, r.clone()));
    let err = check_input(&x, &dx, 1e-2, 96, &|xx| probe_loss(&attn.forward(xx).0, &r));
    assert!(err < TOL, "attention input grad rel err {err:.2e}");
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = init_rng(4);
    let attn = SelfAttention::new(8, 2, 4, &mut rng);
    let (_, c) = attn.forward(&input(8, 4, 4, 40));
    for h in 0..2 {
        for row in c.head(h).chunks(16) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn resblock_gradients() {
    let mut rng = init_rng(5);
    let x = input(4, 4, 6, 50);
    let emb = act::silu_slice(&probe_weights(6, 51));
    for cout in [4, 8] {
        let mut rb = ResBlock::new(4, cout, 6, 2, &mut rng);
        let r = probe_weights(cout * 24, 52);
        let reports = check_params(
            &mut rb,
            1e-2,
            30,
            &|m: &ResBlock| probe_loss(&m.forward(&x, &emb).0, &r),
            &|m: &mut ResBlock| {
                m.zero_grad();
                let (_, c) = m.forward(&x, &emb);
                m.backward(&c, &emb, &Tensor::from_vec(cout, 4, 6, r.clone()));
            },
        );
        assert_reports("resblock", &reports);
    }
}

#[test]
fn linear_gradients() {
    let mut rng = init_rng(6);
    let x = probe_weights(5, 60);
    let r = probe_weights(3, 61);
    let mut lin = Linear::new(5, 3, &mut rng);
    let reports = check_params(
        &mut lin,
        1e-2,
        15,
        &|m: &Linear| m.forward(&x).iter().zip(&r).map(|(a, b)| (*a * *b) as f64).sum(),
        &|m: &mut Linear| {
            m.zero_grad();
            m.backward(&x, &r);
        },
    );
    assert_reports("linear", &reports);
}
