use medi_core::diffusion::*;
use medi_core::registry::{DatasetManifest, PatchRecord};
use medi_core::Error;
use medi_nn::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn tiny_config(size: usize) -> UnetConfig {
    UnetConfig { image_size: size, in_channels: 1, base_channels: 2, channel_mults: vec![1], norm_groups: 1 }
}

/// Returns a fixed tensor, or zeros, regardless of its input.
struct Stub {
    params: ParamStore<f64>,
    shape: [usize; 3],
    output: Option<Tensor<f64>>,
}

impl NoisePredictor<f64> for Stub {
    fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn predict_noise(
        &self,
        tape: &mut Tape<'_, f64>,
        x_t: Var,
        _: &[usize],
        _: &[Conditioning],
        _: Option<&[f64]>,
    ) -> medi_core::Result<Var> {
        let shape = tape.value(x_t).shape().to_vec();
        let out = self.output.clone().unwrap_or_else(|| Tensor::zeros(shape));
        Ok(tape.input(out))
    }
}

#[test]
fn forward_process_moments() {
    let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let x0 = [0.8f64, -0.3, 0.0];
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in [1, 10, 250, 500, 1000] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for i in 0..3 {
                sum[i] += xt[i];
                sq[i] += xt[i] * xt[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = (sq[i] - n as f64 * mean * mean) / (n as f64 - 1.0);
            let want_var = 1.0 - ab;
            assert!((mean - ab.sqrt() * x0[i]).abs() <= 3.0 * (want_var / n as f64).sqrt(), "t={t} mean {mean}");
            assert!((var - want_var).abs() <= 3.0 * want_var * (2.0 / (n as f64 - 1.0)).sqrt(), "t={t} var {var}");
        }
    }
}

#[test]
fn loss_of_oracle_and_zero_predictors() {
    let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let x0 = gaussian(vec![64, 1, 8, 8], 1);
    let eps = gaussian(vec![64, 1, 8, 8], 2);
    let ts: Vec<usize> = (0..64).map(|i| 1 + i * 15).collect();
    let conds = vec![Conditioning::class_only(0); 64];
    let oracle = Stub { params: ParamStore::new(), shape: [1, 8, 8], output: Some(eps.clone()) };
    let (tape, loss) = denoising_loss(&oracle, &s, &x0, &ts, &eps, &conds, None).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);

    let zero = Stub { params: ParamStore::new(), shape: [1, 8, 8], output: None };
    let (tape, loss) = denoising_loss(&zero, &s, &x0, &ts, &eps, &conds, None).unwrap();
    let want = eps.data().iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
    let got = tape.value(loss).data()[0];
    assert!((got - want).abs() < 1e-12);
    assert!((got - 1.0).abs() < 0.05, "unit-variance noise should give a loss near 1, got {got}");

    assert!(denoising_loss(&zero, &s, &x0, &vec![0; 64], &eps, &conds, None).is_err());
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let spec = ConditioningSpec::new(2, 2, 4, 3, vec![2]).unwrap();
    let mut model = DenoiserModel::<f64>::new(tiny_config(4), spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let n = model.params().num_scalars();
    assert!(n <= 1000, "{n} parameters");
    let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let x0 = gaussian(vec![2, 1, 4, 4], 4);
    let eps = gaussian(vec![2, 1, 4, 4], 5);
    let ts = [40, 700];
    let conds = [Conditioning::new(1, vec![0]), Conditioning::new(2, vec![1])];
    let loss_of = |m: &DenoiserModel<f64>| {
        let (tape, l) = denoising_loss(m, &s, &x0, &ts, &eps, &conds, None).unwrap();
        tape.value(l).data()[0]
    };
    let grads = {
        let (tape, l) = denoising_loss(&model, &s, &x0, &ts, &eps, &conds, None).unwrap();
        tape.backward(l)
    };
    let coords: Vec<(medi_nn::ParamId, usize)> =
        model.params().iter().flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    for _ in 0..20 {
        let (id, i) = coords[rng.random_range(0..coords.len())];
        let orig = model.params().value(id).data()[i];
        model.params_mut().value_mut(id).data_mut()[i] = orig + h;
        let up = loss_of(&model);
        model.params_mut().value_mut(id).data_mut()[i] = orig - h;
        let down = loss_of(&model);
        model.params_mut().value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel < 1e-4 || (analytic - numeric).abs() < 1e-9,
            "{}[{i}]: analytic {analytic} numeric {numeric}",
            model.params().get(id).name
        );
    }
}

fn toy_training_set(n: usize, sites: usize) -> TrainingSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = TrainingSet { image_shape: [1, 8, 8], images: Vec::new(), conds: Vec::new(), ids: Vec::new() };
    for i in 0..n {
        let class = i % 2;
        let site = i % sites;
        let img: Vec<f32> = (0..64)
            .map(|p| {
                let (y, x) = (p / 8, p % 8);
                let stripe = if class == 0 { y % 2 } else { x % 2 } as f32;
                0.8 * stripe - 0.4 + 0.2 * site as f32 + 0.05 * rng.sample::<f32, _>(StandardNormal)
            })
            .collect();
        set.images.push(img);
        set.conds.push(Conditioning::new(class, vec![site]));
        set.ids.push(format!("p{i}"));
    }
    set
}

fn small_model(seed: u64, sites: usize) -> DenoiserModel<f32> {
    let spec = ConditioningSpec::new(8, 8, 16, 2, vec![sites]).unwrap();
    let cfg = UnetConfig { image_size: 8, in_channels: 1, base_channels: 4, channel_mults: vec![1, 2], norm_groups: 2 };
    DenoiserModel::new(cfg, spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn training_loss_decreases() {
    let data = toy_training_set(64, 2);
    let config = TrainConfig { steps: 5000, lr: 2e-3, batch_size: 16, seed: 1, ..TrainConfig::default() };
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut trainer = Trainer::new(small_model(0, 2), schedule, config).unwrap();
    let losses = trainer.fit(&data, |_, _| {}).unwrap();
    assert_eq!(losses.len(), 5000);
    let first = losses[..500].iter().sum::<f64>() / 500.0;
    let last = losses[4500..].iter().sum::<f64>() / 500.0;
    assert!(last < first, "first-500 mean {first}, last-500 mean {last}");
}

#[test]
fn metadata_changes_the_prediction() {
    let m = small_model(2, 3);
    let x: Vec<f32> = gaussian(vec![64], 7).data().iter().map(|v| *v as f32).collect();
    let a = m.predict(&x, &[300], &[Conditioning::new(0, vec![0])]).unwrap();
    let b = m.predict(&x, &[300], &[Conditioning::new(0, vec![2])]).unwrap();
    assert!(a.iter().zip(&b).any(|(p, q)| p != q));
    assert!(m.predict(&x, &[300], &[Conditioning::new(0, vec![3])]).is_err());
    assert!(m.predict(&x, &[300], &[Conditioning::class_only(0)]).is_err());
}

#[test]
fn class_only_model_takes_no_metadata() {
    let spec = ConditioningSpec::class_only(16, 2).unwrap();
    assert_eq!(spec, ConditioningSpec::new(16, 0, 16, 2, vec![]).unwrap());
    let cfg = UnetConfig { image_size: 8, in_channels: 1, base_channels: 4, channel_mults: vec![1, 2], norm_groups: 2 };
    let m = DenoiserModel::<f32>::new(cfg, spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = vec![0.1f32; 64];
    assert!(m.predict(&x, &[10], &[Conditioning::class_only(1)]).is_ok());
    assert!(matches!(m.predict(&x, &[10], &[Conditioning::new(1, vec![0])]), Err(Error::Conditioning(_))));
}

#[test]
fn only_rows_in_the_batch_are_updated() {
    let data = toy_training_set(8, 1);
    let model = small_model(4, 3);
    let table = model.tables.attributes[0];
    let before = model.params().value(table).clone();
    let class_before = model.params().value(model.tables.class).clone();
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let config = TrainConfig { steps: 3, lr: 1e-2, batch_size: 8, seed: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, schedule, config).unwrap();
    trainer.fit(&data, |_, _| {}).unwrap();
    let after = trainer.model.params().value(table);
    let w = after.dim(1);
    assert_ne!(&after.data()[..w], &before.data()[..w], "site 0 was trained");
    assert_eq!(&after.data()[w..], &before.data()[w..], "sites 1 and 2 never appeared");
    // Both classes appear, so both class rows move.
    let class_after = trainer.model.params().value(trainer.model.tables.class);
    let cw = class_after.dim(1);
    assert_ne!(&class_after.data()[cw..], &class_before.data()[cw..]);
}

#[test]
fn fixed_seeds_reproduce_training_and_sampling() {
    let data = toy_training_set(32, 2);
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let run = || {
        let config = TrainConfig { steps: 20, lr: 1e-3, batch_size: 8, seed: 11, ..TrainConfig::default() };
        let mut t = Trainer::new(small_model(1, 2), schedule.clone(), config).unwrap();
        let losses = t.fit(&data, |_, _| {}).unwrap();
        (losses, t.into_model())
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma.params().value(ma.tables.class), mb.params().value(mb.tables.class));
    let c = Conditioning::new(1, vec![0]);
    let ia: Vec<f32> = ddim_sample(&ma, &schedule, &c, 10, 42).unwrap();
    let ib: Vec<f32> = ddim_sample(&mb, &schedule, &c, 10, 42).unwrap();
    assert_eq!(ia, ib);
    let ic: Vec<f32> = ddim_sample(&ma, &schedule, &c, 10, 43).unwrap();
    assert_ne!(ia, ic);
}

#[test]
fn single_ddim_step_with_zero_noise_prediction() {
    let cfg = ScheduleConfig { timesteps: 10, beta_start: 0.1, beta_end: 0.2 };
    let schedule = NoiseSchedule::linear(&cfg).unwrap();
    let stub = Stub { params: ParamStore::new(), shape: [1, 2, 2], output: None };
    let seed = 8;
    // Independent recomputation of the betas and the cumulative product.
    let ab: f64 = (0..10).map(|i| 1.0 - (0.1 + 0.1 * i as f64 / 9.0)).product();
    let x_t: Vec<f64> = initial_noise(4, seed);
    let expected: Vec<f64> = x_t.iter().map(|x| (x / ab.sqrt()).clamp(-1.0, 1.0)).collect();
    let got: Vec<f64> = ddim_sample(&stub, &schedule, &Conditioning::class_only(0), 1, seed).unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }

    // Two unclipped steps, 10 -> 5 -> 0, written out by hand.
    let ab5: f64 = (0..5).map(|i| 1.0 - (0.1 + 0.1 * i as f64 / 9.0)).product();
    let step1: Vec<f64> = x_t.iter().map(|x| ab5.sqrt() * x / ab.sqrt()).collect();
    let step2: Vec<f64> = step1.iter().map(|x| x / ab5.sqrt()).collect();
    let config = DdimConfig { num_inference_steps: 2, clip_sample: false, batch_size: 1 };
    let got = ddim_sample_batch(&stub, &schedule, &[Conditioning::class_only(0)], &[seed], &config).unwrap();
    for (g, e) in got[0].iter().zip(&step2) {
        assert!((g - e.clamp(-1.0, 1.0)).abs() < 1e-12);
    }
    assert_eq!(ddim_timesteps(1000, 100).unwrap()[..3], [1000, 990, 980]);
}

fn record(id: &str, class: &str, site: &str) -> PatchRecord {
    PatchRecord {
        patch_id: id.into(),
        image_ref: format!("{id}.png").into(),
        patient_id: format!("P{id}"),
        class_label: class.into(),
        site: site.into(),
        race: "R0".into(),
        gender: "F".into(),
        age: Some(50),
        synthetic: false,
    }
}

#[test]
fn checkpoint_refuses_a_different_vocabulary() {
    let m = DatasetManifest::from_records(vec![record("a", "C0", "S0"), record("b", "C1", "S1")], ".").unwrap();
    let map = ConditioningMap::from_schema(m.schema(), &[medi_core::registry::Attribute::Site]).unwrap();
    let spec = map.spec(8, 8, 16).unwrap();
    let cfg = UnetConfig { image_size: 8, in_channels: 1, base_channels: 4, channel_mults: vec![1, 2], norm_groups: 2 };
    let model = DenoiserModel::<f32>::new(cfg, spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ck = Checkpoint::from_model(&model, &ScheduleConfig::default(), &map, m.schema(), 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    loaded.check_schema(m.schema()).unwrap();
    assert_eq!(loaded.model().unwrap().params().value(model.tables.class), model.params().value(model.tables.class));

    let grown =
        DatasetManifest::from_records(vec![record("a", "C0", "S0"), record("b", "C1", "S1"), record("c", "C1", "S2")], ".")
            .unwrap();
    assert!(matches!(loaded.check_schema(grown.schema()), Err(Error::FingerprintMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spec_accepts_exactly_matching_widths(
        d_class in 1usize..40, d_e in 1usize..20, k in 0usize..4, d_t in 1usize..100, cards in proptest::collection::vec(1usize..6, 4)
    ) {
        let attrs = cards[..k].to_vec();
        let ok = ConditioningSpec::new(d_class, d_e, d_t, 3, attrs).is_ok();
        prop_assert_eq!(ok, d_class + k * d_e == d_t);
    }
}
