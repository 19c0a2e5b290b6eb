use diffcolor::diffusion::toy::{ToyBackend, ToyConfig};
use diffcolor::diffusion::{ldm_loss, ldm_loss_with_grad, make_schedule, Denoiser, DiffusionBackend, Latent, LatentShape, ScheduleKind};
use diffcolor::guidance::{
    contrastive_loss, contrastive_loss_with_grad, GuidanceBackend, LogitMode, NegativePromptSet, ToyGuidance,
    ToyGuidanceConfig,
};
use diffcolor::stage1::combined_objective;
use diffcolor::{GrayImage, Result, Rng, TextEmbedding};

fn naive_softmax_nll(logits: &[f64]) -> f64 {
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[0].exp() / denom).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

struct Case {
    e: Vec<f64>,
    pos: Vec<f64>,
    negs: Vec<Vec<f64>>,
}

fn random_case(rng: &mut Rng) -> Case {
    let d = rng.int(2, 17);
    let k = rng.int(1, 6);
    let scale = 0.5;
    let v = |rng: &mut Rng| rng.normal_vec(d).into_iter().map(|x| x * scale).collect::<Vec<_>>();
    Case { e: v(rng), pos: v(rng), negs: (0..k).map(|_| v(rng)).collect() }
}

#[test]
fn contrastive_matches_direct_softmax() {
    let mut rng = Rng::new(2024);
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let negs: Vec<&[f64]> = c.negs.iter().map(Vec::as_slice).collect();

        let mut logits = vec![dot(&c.e, &c.pos)];
        logits.extend(c.negs.iter().map(|n| dot(&c.e, n)));
        let oracle = naive_softmax_nll(&logits);
        let got = contrastive_loss(&c.e, &c.pos, &negs).unwrap();
        assert!((got - oracle).abs() < 1e-9 * (1.0 + oracle.abs()), "{got} vs {oracle}");

        let tau = 0.1;
        let mut logits = vec![cos(&c.e, &c.pos) / tau];
        logits.extend(c.negs.iter().map(|n| cos(&c.e, n) / tau));
        let oracle = naive_softmax_nll(&logits);
        let (got, _) = contrastive_loss_with_grad(&c.e, &c.pos, &negs, LogitMode::Cosine { temperature: tau }).unwrap();
        assert!((got - oracle).abs() < 1e-9 * (1.0 + oracle.abs()), "{got} vs {oracle}");
    }
}

#[test]
fn equal_logits_give_log_class_count() {
    let e = [0.3, -1.2, 0.8];
    let p = [1.0, 1.0, 1.0];
    for k in 1..=6 {
        let negs: Vec<&[f64]> = vec![&p; k];
        let l = contrastive_loss(&e, &p, &negs).unwrap();
        assert!((l - ((k + 1) as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = Rng::new(77);
    let h = 1e-6;
    for mode in [LogitMode::Dot, LogitMode::Cosine { temperature: 0.2 }] {
        for _ in 0..20 {
            let c = random_case(&mut rng);
            let negs: Vec<&[f64]> = c.negs.iter().map(Vec::as_slice).collect();
            let (_, g) = contrastive_loss_with_grad(&c.e, &c.pos, &negs, mode).unwrap();
            for i in 0..c.e.len() {
                let mut e = c.e.clone();
                e[i] += h;
                let up = contrastive_loss_with_grad(&e, &c.pos, &negs, mode).unwrap().0;
                e[i] -= 2.0 * h;
                let dn = contrastive_loss_with_grad(&e, &c.pos, &negs, mode).unwrap().0;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{mode:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }
}

/// Returns the true noise plus a constant.
struct Offset {
    eps: Latent,
    c: f64,
}

impl Denoiser for Offset {
    fn denoise(&self, _: &Latent, _: usize, _: &TextEmbedding) -> Result<Latent> {
        Latent::new(self.eps.shape(), self.eps.data().iter().map(|v| v + self.c).collect())
    }
}

#[test]
fn ldm_loss_of_offset_predictor_is_offset_squared() {
    let schedule = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
    let shape = LatentShape::new(4, 8, 8);
    let mut rng = Rng::new(9);
    let emb = TextEmbedding::zeros(4);
    for c in [0.0, 0.1, -0.7, 2.5] {
        let z0 = Latent::gaussian(shape, &mut rng);
        let eps = Latent::gaussian(shape, &mut rng);
        let t = rng.int(1, 1000);
        let l = ldm_loss(&Offset { eps: eps.clone(), c }, &z0, t, &eps, &emb, &schedule).unwrap();
        assert!((l - c * c).abs() < 1e-12, "c = {c}: {l}");
    }
}

/// Returns a fixed prediction regardless of input.
struct Fixed(Latent);

impl Denoiser for Fixed {
    fn denoise(&self, _: &Latent, _: usize, _: &TextEmbedding) -> Result<Latent> {
        Ok(self.0.clone())
    }
}

#[test]
fn ldm_gradient_wrt_prediction_matches_finite_differences() {
    let schedule = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
    let shape = LatentShape::new(4, 4, 4);
    let mut rng = Rng::new(44);
    let (z0, eps, pred) = (Latent::gaussian(shape, &mut rng), Latent::gaussian(shape, &mut rng), Latent::gaussian(shape, &mut rng));
    let emb = TextEmbedding::zeros(2);
    let (_, terms) = ldm_loss_with_grad(&Fixed(pred.clone()), &z0, 300, &eps, &emb, &schedule).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let i = rng.int(0, shape.len() - 1);
        let mut d = pred.data().to_vec();
        d[i] += h;
        let up = ldm_loss(&Fixed(Latent::new(shape, d.clone()).unwrap()), &z0, 300, &eps, &emb, &schedule).unwrap();
        d[i] -= 2.0 * h;
        let dn = ldm_loss(&Fixed(Latent::new(shape, d).unwrap()), &z0, 300, &eps, &emb, &schedule).unwrap();
        let fd = (up - dn) / (2.0 * h);
        let g = terms.grad_eps_hat.data()[i];
        assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()) + 1e-12, "{i}: fd {fd} vs {g}");
    }
}

fn small_backend() -> ToyBackend {
    let cfg = ToyConfig { ae_hidden: 6, denoiser_hidden: 5, cond_hidden: 7, image_size: 16, ..ToyConfig::default() };
    ToyBackend::new(cfg).unwrap()
}

fn gradient_gray() -> GrayImage {
    GrayImage::from_fn(16, 16, |x, y| 0.3 + 0.4 * ((x as f64 * 0.5).sin() * (y as f64 * 0.3).cos()).abs()).unwrap()
}

/// The full training gradient (noise prediction, one-step decode, image
/// encoder, contrastive term) against central differences on the loss alone.
#[test]
fn combined_gradient_matches_finite_differences() {
    let guidance = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let gray = gradient_gray();
    let mut negatives = NegativePromptSet::default();
    let context = "A photo of a red apple on a green table.";
    let mut backend = small_backend();
    let mut rng = Rng::new(31);
    let shape = backend.info().latent_shape;
    let h = 1e-6;

    for mode in [LogitMode::Dot, LogitMode::Cosine { temperature: 0.5 }] {
        let t = rng.int(100, 900);
        let eps = Latent::gaussian(shape, &mut rng);
        let (entry, grad) =
            combined_objective(&backend, &guidance, &gray, context, &mut negatives, 0.5, mode, t, &eps).unwrap();
        assert!(entry.cst > 0.0);
        assert!((entry.combined - (entry.ldm + 0.5 * entry.cst)).abs() < 1e-12);

        let n = backend.denoiser_params().len();
        for _ in 0..20 {
            let i = rng.int(0, n - 1);
            let orig = backend.denoiser_params()[i];
            let mut eval = |v: f64, b: &mut ToyBackend| {
                b.denoiser_params_mut()[i] = v;
                combined_objective(&*b, &guidance, &gray, context, &mut negatives, 0.5, mode, t, &eps).unwrap().0.combined
            };
            let up = eval(orig + h, &mut backend);
            let dn = eval(orig - h, &mut backend);
            backend.denoiser_params_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            assert!((fd - grad[i]).abs() <= 1e-4 * scale + 1e-9, "{mode:?} param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn zero_lambda_reduces_to_reconstruction_loss() {
    let guidance = ToyGuidance::new(ToyGuidanceConfig::default()).unwrap();
    let backend = small_backend();
    let mut negatives = NegativePromptSet::default();
    let eps = Latent::gaussian(backend.info().latent_shape, &mut Rng::new(1));
    let (entry, _) =
        combined_objective(&backend, &guidance, &gradient_gray(), "A red car.", &mut negatives, 0.0, LogitMode::Dot, 500, &eps)
            .unwrap();
    assert_eq!(entry.combined, entry.ldm);
    let z0 = diffcolor::stage1::encode_gray(&backend, &gradient_gray()).unwrap();
    let direct = ldm_loss(&backend, &z0, 500, &eps, &guidance.encode_text("A red car."), backend.schedule()).unwrap();
    assert!((entry.ldm - direct).abs() < 1e-15);
}
