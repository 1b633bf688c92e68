use super::*;
use crate::autodiff::Tape;
use crate::batch::CyclicWindows;
use crate::model::{ModelConfig, TinyLm};
use crate::params::{gaussian, name_rng};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

/// `f(θ, φ) = ½ zᵀHz − gᵀz` with `z = [θ; φ]`.
struct Quadratic {
    store: ParamStore,
    h: Tensor,
    g: Tensor,
}

impl Quadratic {
    fn new(h: Tensor, g: Tensor, p: usize) -> Self {
        let n = h.rows();
        let mut store = ParamStore::new();
        store.add("theta", ParamRole::Expert { layer: 0, expert: 0 }, Tensor::filled(&[p, 1], 0.5));
        store.add("phi", ParamRole::Router { layer: 0 }, Tensor::filled(&[n - p, 1], -0.5));
        Self { store, h, g }
    }

    fn value(&self) -> f64 {
        self.evaluate(&(), 0.0, LoadBalanceMode::Uniform, &|_| false).unwrap().task_loss
    }
}

impl Trainable for Quadratic {
    type Batch = ();

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn evaluate(&self, _: &(), _: f64, _: LoadBalanceMode, trainable: &dyn Fn(&ParamRole) -> bool) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, trainable);
        let z = tape.concat_rows(&vars)?;
        let h = tape.constant(self.h.clone());
        let g = tape.constant(self.g.clone());
        let hz = tape.matmul(h, z)?;
        let quad = tape.mul(z, hz)?;
        let quad = tape.sum(quad);
        let quad = tape.scale(quad, 0.5);
        let lin = tape.mul(g, z)?;
        let lin = tape.sum(lin);
        let lin = tape.scale(lin, -1.0);
        let f = tape.add(quad, lin)?;
        let ids = self.store.select(trainable);
        let grads = if ids.is_empty() {
            Vec::new()
        } else {
            let gr = tape.backward(f)?;
            ids.into_iter().map(|id| (id, gr.get(vars[id.index()]))).collect()
        };
        Ok(Evaluation {
            task_loss: tape.value(f).item(),
            lb_loss: 0.0,
            grads,
            generalist_scores: Vec::new(),
        })
    }
}

struct Unit;

impl BatchSource<()> for Unit {
    fn train_batch(&mut self) -> Result<()> {
        Ok(())
    }
    fn valid_batch(&mut self) -> Result<()> {
        Ok(())
    }
}

fn toy_quadratic() -> Quadratic {
    let h = Tensor::from_rows(&[&[2.0, 0.5, 0.0], &[0.5, 1.0, 0.3], &[0.0, 0.3, 1.5]]);
    let g = Tensor::matrix(3, 1, vec![1.0, -1.0, 0.5]).unwrap();
    Quadratic::new(h, g, 2)
}

#[test]
fn one_cycle_schedule_landmarks() {
    assert_abs_diff_eq!(one_cycle_lr(0, 200, 2e-3), 2e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(one_cycle_lr(20, 200, 2e-3), 2e-3, epsilon = 1e-18);
    assert_abs_diff_eq!(one_cycle_lr(200, 200, 2e-3), 2e-4, epsilon = 1e-15);
    assert_abs_diff_eq!(one_cycle_lr(10, 200, 1.0), 0.55, epsilon = 1e-15);
    assert_abs_diff_eq!(one_cycle_lr(110, 200, 1.0), 0.55, epsilon = 1e-12);
    for s in 20..200 {
        assert!(one_cycle_lr(s + 1, 200, 1.0) <= one_cycle_lr(s, 200, 1.0));
    }
}

#[test]
fn defaults_match_published_hyperparameters() {
    let c = TrainerConfig::default();
    assert_eq!((c.tau, c.router_steps), (30, 10));
    assert_eq!(c.lb_weight, 0.01);
    assert_eq!(c.router_lr, 2e-3);
    assert_eq!(c.expert_lr, 2e-3);
}

#[test]
fn expert_step_without_balance_is_plain_gradient_step() {
    let mut q = toy_quadratic();
    let cfg = TrainerConfig {
        optimizer: OptimizerKind::Sgd,
        schedule: ScheduleKind::Constant,
        expert_lr: 0.1,
        lb_weight: 0.0,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 10);
    let before = q.store.get(ParamId(0)).clone();
    let phi = q.store.get(ParamId(1)).clone();
    expert_step(&mut q, &mut state, &cfg, &()).unwrap();
    // ∇θ f = (Hz − g) restricted to θ, computed by hand.
    let z = [0.5, 0.5, -0.5];
    for (i, &b) in before.data().iter().enumerate() {
        let grad: f64 = (0..3).map(|j| q.h.get(i, j) * z[j]).sum::<f64>() - q.g.data()[i];
        assert_abs_diff_eq!(q.store.get(ParamId(0)).data()[i], b - 0.1 * grad, epsilon = 1e-15);
    }
    assert_eq!(q.store.get(ParamId(1)), &phi);
}

fn lm_setup(seed: u64) -> (TinyLm, Vec<usize>, Vec<usize>) {
    let cfg = ModelConfig {
        d_model: 16,
        blocks: 1,
        experts: 3,
        ..ModelConfig::default()
    };
    let mut model = TinyLm::new(&cfg, seed).unwrap();
    // Nonzero B so both partitions receive gradients.
    let ids = model.params().select(|r| r.is_expert_side());
    for id in ids {
        let name = model.params().entry(id).name.clone();
        let shape = model.params().get(id).shape().to_vec();
        *model.params_mut().get_mut(id) = gaussian(seed + 1, &name, &shape, 0.05);
    }
    let train: Vec<usize> = (0..2000).map(|i| (i * 7 + i / 5) % 64).collect();
    let valid: Vec<usize> = (0..400).map(|i| (i * 3 + i / 7) % 64).collect();
    (model, train, valid)
}

fn batches<'a>(train: &'a [usize], valid: &'a [usize], cursor: &'a mut CyclicWindows, seed: u64) -> StreamBatches<'a> {
    StreamBatches {
        train,
        valid,
        window: 17,
        batch_size: 4,
        rng: name_rng(seed, "test"),
        valid_cursor: cursor,
    }
}

fn snapshot(model: &TinyLm, pred: impl Fn(&ParamRole) -> bool) -> Vec<Tensor> {
    model
        .params()
        .select(pred)
        .into_iter()
        .map(|id| model.params().get(id).clone())
        .collect()
}

#[test]
fn expert_step_freezes_routers_and_router_step_freezes_experts() {
    let (mut model, train, valid) = lm_setup(1);
    let cfg = TrainerConfig::default();
    let mut state = BilevelState::new(&cfg, 10);
    let mut cursor = CyclicWindows::new(17);
    let mut src = batches(&train, &valid, &mut cursor, 1);

    let routers = snapshot(&model, |r| r.is_router());
    let experts = snapshot(&model, |r| r.is_expert_side());
    let base = snapshot(&model, |r| *r == ParamRole::Base);
    expert_step(&mut model, &mut state, &cfg, &src.train_batch().unwrap()).unwrap();
    assert_eq!(snapshot(&model, |r| r.is_router()), routers);
    assert_ne!(snapshot(&model, |r| r.is_expert_side()), experts);

    let experts = snapshot(&model, |r| r.is_expert_side());
    router_step(&mut model, &mut state, &cfg, &src.valid_batch().unwrap()).unwrap();
    assert_eq!(snapshot(&model, |r| r.is_expert_side()), experts);
    assert_ne!(snapshot(&model, |r| r.is_router()), routers);
    assert_eq!(snapshot(&model, |r| *r == ParamRole::Base), base);
}

#[test]
fn zero_router_steps_is_a_no_op() {
    let (mut model, train, valid) = lm_setup(2);
    let cfg = TrainerConfig {
        router_steps: 0,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 10);
    let mut cursor = CyclicWindows::new(17);
    let mut src = batches(&train, &valid, &mut cursor, 2);
    let before = model.params().clone();
    assert_eq!(router_update(&mut model, &mut state, &cfg, &mut src).unwrap(), None);
    assert_eq!(model.params(), &before);
    assert_eq!(state.router_updates, 0);
}

#[test]
fn long_period_equals_expert_only_training() {
    let run = |cfg: &TrainerConfig| {
        let (mut model, train, valid) = lm_setup(3);
        let mut state = BilevelState::new(cfg, 12);
        let mut cursor = CyclicWindows::new(17);
        let mut src = batches(&train, &valid, &mut cursor, 3);
        local_train(&mut model, &mut state, cfg, &mut src, 12).unwrap();
        (model.params().clone(), state.router_updates)
    };
    let (a, ua) = run(&TrainerConfig {
        tau: 13,
        ..Default::default()
    });
    let (b, ub) = run(&TrainerConfig {
        router_steps: 0,
        ..Default::default()
    });
    assert_eq!((ua, ub), (0, 0));
    assert_eq!(a, b);
}

#[test]
fn unit_period_alternates_strictly() {
    let mut q = toy_quadratic();
    let cfg = TrainerConfig {
        tau: 1,
        router_steps: 1,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 7);
    local_train(&mut q, &mut state, &cfg, &mut Unit, 7).unwrap();
    assert_eq!(state.router_updates, 7);
    assert_eq!(state.log.len(), 7);
    assert!(state.log.iter().all(|l| l.valid_loss.is_some()));
}

#[test]
fn iteration_counter_spans_calls() {
    let mut q = toy_quadratic();
    let cfg = TrainerConfig {
        tau: 4,
        router_steps: 2,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 30);
    for _ in 0..3 {
        local_train(&mut q, &mut state, &cfg, &mut Unit, 3).unwrap();
    }
    // Iterations 4 and 8 fall inside the second and third calls.
    assert_eq!(state.iteration, 9);
    assert_eq!(state.router_updates, 2);
    let iters: Vec<_> = state.log.iter().map(|l| l.iteration).collect();
    assert_eq!(iters, (1..=9).collect::<Vec<_>>());
}

#[test]
fn training_loss_decreases_over_smoothed_steps() {
    let (mut model, train, valid) = lm_setup(4);
    let cfg = TrainerConfig {
        expert_lr: 1e-2,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 100);
    let mut cursor = CyclicWindows::new(17);
    let mut src = batches(&train, &valid, &mut cursor, 4);
    local_train(&mut model, &mut state, &cfg, &mut src, 100).unwrap();
    let losses: Vec<f64> = state.log.iter().map(|l| l.train_loss).collect();
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[50..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn corrupted_specialists_shift_routing_to_generalist() {
    let (mut model, train, valid) = lm_setup(5);
    // Generalist adapters off, specialists large random noise.
    let ids = model.params().select(|r| r.is_expert_side());
    for id in ids {
        let e = model.params().entry(id).clone();
        let shape = e.value.shape().to_vec();
        let generalist = matches!(e.role, ParamRole::Expert { expert: 0, .. });
        *model.params_mut().get_mut(id) = if generalist {
            Tensor::zeros(&shape)
        } else {
            gaussian(77, &e.name, &shape, 1.0)
        };
    }
    // Pretrained-scale embeddings so routing responds to its inputs.
    let embed = model.params().find("embed").unwrap();
    *model.params_mut().get_mut(embed) = gaussian(78, "embed", &[64, 16], 1.0);
    let cfg = TrainerConfig {
        router_steps: 1,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 1);
    let mut cursor = CyclicWindows::new(17);
    let probe = CyclicWindows::new(17).next_batch(&valid, 16).unwrap();
    let mut src = batches(&train, &valid, &mut cursor, 5);
    let score = |m: &TinyLm| {
        m.evaluate(&probe, 0.0, LoadBalanceMode::Uniform, &|_| false)
            .unwrap()
            .generalist_scores[0]
    };
    let mut scores = vec![score(&model)];
    for _ in 0..10 {
        router_update(&mut model, &mut state, &cfg, &mut src).unwrap();
        scores.push(score(&model));
    }
    for w in scores.windows(2) {
        assert!(w[1] > w[0], "{scores:?}");
    }
}

#[test]
fn non_finite_loss_aborts() {
    let (mut model, _, _) = lm_setup(6);
    let id = model.params().find("embed").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let cfg = TrainerConfig::default();
    let mut state = BilevelState::new(&cfg, 5);
    // Token 0 must appear for the NaN row to be read.
    let batch = vec![vec![0; 17]];
    assert!(matches!(
        expert_step(&mut model, &mut state, &cfg, &batch),
        Err(Error::NonFiniteLoss { phase: "expert", .. })
    ));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut model, train, valid) = lm_setup(7);
        let cfg = TrainerConfig {
            tau: 3,
            router_steps: 2,
            ..Default::default()
        };
        let mut state = BilevelState::new(&cfg, 9);
        let mut cursor = CyclicWindows::new(17);
        let mut src = batches(&train, &valid, &mut cursor, 7);
        local_train(&mut model, &mut state, &cfg, &mut src, 9).unwrap();
        (model.params().clone(), state.log)
    };
    assert_eq!(run(), run());
}

#[test]
fn invalid_config_is_rejected() {
    let mut q = toy_quadratic();
    let cfg = TrainerConfig {
        tau: 0,
        ..Default::default()
    };
    let mut state = BilevelState::new(&cfg, 1);
    assert!(local_train(&mut q, &mut state, &cfg, &mut Unit, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn alternation_descends_on_convex_quadratic(entries in proptest::collection::vec(-1.0f64..1.0, 25), g in proptest::collection::vec(-2.0f64..2.0, 5), p in 1usize..5) {
        // H = MᵀM + 0.1·I is positive definite.
        let m = Tensor::matrix(5, 5, entries).unwrap();
        let mut h = m.transpose().matmul(&m).unwrap();
        for i in 0..5 {
            h.data_mut()[i * 5 + i] += 0.1;
        }
        let lipschitz = h.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut q = Quadratic::new(h, Tensor::matrix(5, 1, g).unwrap(), p);
        let cfg = TrainerConfig {
            tau: 1,
            router_steps: 25,
            optimizer: OptimizerKind::Sgd,
            schedule: ScheduleKind::Constant,
            expert_lr: 1.0 / lipschitz,
            router_lr: 1.0 / lipschitz,
            lb_weight: 0.0,
            ..Default::default()
        };
        let mut state = BilevelState::new(&cfg, 40);
        let mut prev = q.value();
        for _ in 0..40 {
            local_train(&mut q, &mut state, &cfg, &mut Unit, 1).unwrap();
            let now = q.value();
            prop_assert!(now <= prev + 1e-10, "{prev} -> {now}");
            prev = now;
        }
    }
}
