//! Neural process over action–reward pairs: a pooled pair encoder feeding an
//! action latent `c_a`, and a reward decoder conditioned on `c`, `c_a` and the
//! target action.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::context_learner::ContextLearner;
use crate::diffcore::layers::Mlp;
use crate::diffcore::{Array, GaussianVar, ParamId, ParameterStore, RngStream, Tape, Var};
use crate::doorsim::{Action, CANDIDATE_HINGE_RANGE, CANDIDATE_RADIUS_RANGE};
use crate::ModelError;

/// Affine maps between raw and network-facing action/reward units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub hinge_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub goal_scale: f64,
    pub reward_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            hinge_range: CANDIDATE_HINGE_RANGE,
            radius_range: CANDIDATE_RADIUS_RANGE,
            goal_scale: PI,
            reward_scale: PI * 1.1,
        }
    }
}

fn to_unit(x: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (x - lo) / (hi - lo) - 1.0
}

fn from_unit(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + (u + 1.0) * 0.5 * (hi - lo)
}

impl Normalization {
    pub fn action(&self, a: &Action) -> [f64; 4] {
        [
            to_unit(a.hinge_guess[0], self.hinge_range),
            to_unit(a.hinge_guess[1], self.hinge_range),
            to_unit(a.radius_guess, self.radius_range),
            a.goal_angle / self.goal_scale,
        ]
    }

    pub fn denormalize_action(&self, u: [f64; 4]) -> Action {
        Action {
            hinge_guess: [from_unit(u[0], self.hinge_range), from_unit(u[1], self.hinge_range)],
            radius_guess: from_unit(u[2], self.radius_range),
            goal_angle: u[3] * self.goal_scale,
        }
    }

    pub fn reward(&self, r: f64) -> f64 {
        r / self.reward_scale
    }

    pub fn denormalize_reward(&self, r: f64) -> f64 {
        r * self.reward_scale
    }

    fn action_matrix(&self, actions: &[Action]) -> Array {
        let data = actions.iter().flat_map(|a| self.action(a)).collect();
        Array::new(vec![actions.len(), 4], data).expect("4 columns per action")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionConfig {
    pub hidden: usize,
    pub d_h: usize,
    pub d_ca: usize,
    /// Width of the object latent fed to the decoder; 0 disables it.
    pub d_c: usize,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            d_h: 64,
            d_ca: 16,
            d_c: 16,
        }
    }
}

/// Pooled pair embedding `[1, d_h]`; `empty` marks the zero-pair convention.
#[derive(Clone, Copy, Debug)]
pub struct ActionPairEmbedding {
    pub h: Var,
    pub empty: bool,
}

/// How many pairs feed the partial posterior in the matching term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetSize {
    Random,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct ActionLoss {
    pub total: Var,
    pub mse: Var,
    pub kl_prior: Var,
    pub kl_match: Var,
}

#[derive(Clone, Debug)]
pub struct ActionModel {
    pub cfg: ActionConfig,
    pub norm: Normalization,
    pair_encoder: Mlp,
    aggregator: Mlp,
    decoder: Mlp,
}

impl ActionModel {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: ActionConfig,
        norm: Normalization,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        let h = cfg.hidden;
        Ok(Self {
            cfg,
            norm,
            pair_encoder: Mlp::new(store, &format!("{prefix}.pair_encoder"), &[5, h, cfg.d_h], rng)?,
            aggregator: Mlp::new(store, &format!("{prefix}.aggregator"), &[cfg.d_h, h, 2 * cfg.d_ca], rng)?,
            decoder: Mlp::new(
                store,
                &format!("{prefix}.decoder"),
                &[cfg.d_c + cfg.d_ca + 4, h, h, 1],
                rng,
            )?,
        })
    }

    pub fn uses_context(&self) -> bool {
        self.cfg.d_c > 0
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.pair_encoder
            .params()
            .chain(self.aggregator.params())
            .chain(self.decoder.params())
            .collect()
    }

    /// Mean-pooled embedding of (normalized action, normalized reward) pairs.
    pub fn encode_actions(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        actions: &[Action],
        rewards: &[f64],
    ) -> Result<ActionPairEmbedding, ModelError> {
        if actions.len() != rewards.len() {
            return Err(ModelError::Input(format!(
                "{} actions but {} rewards",
                actions.len(),
                rewards.len()
            )));
        }
        if actions.is_empty() {
            let h = tape.constant(Array::zeros(&[1, self.cfg.d_h]));
            return Ok(ActionPairEmbedding { h, empty: true });
        }
        let mut data = Vec::with_capacity(actions.len() * 5);
        for (a, &r) in actions.iter().zip(rewards) {
            data.extend(self.norm.action(a));
            data.push(self.norm.reward(r));
        }
        let x = tape.constant(Array::new(vec![actions.len(), 5], data)?);
        let per_pair = self.pair_encoder.forward(tape, store, x)?;
        Ok(ActionPairEmbedding {
            h: tape.mean_pool_set(per_pair),
            empty: false,
        })
    }

    /// `q(c_a | h_a)`; exactly `N(0, I)` for the empty set.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        emb: &ActionPairEmbedding,
    ) -> Result<GaussianVar, ModelError> {
        if emb.empty {
            return Ok(GaussianVar::standard(tape, &[1, self.cfg.d_ca]));
        }
        let out = self.aggregator.forward(tape, store, emb.h)?;
        Ok(GaussianVar::from_params(tape, out)?)
    }

    /// Normalized reward predictions `[n, 1]` for each target action.
    pub fn decode_reward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        c: Option<Var>,
        c_a: Var,
        actions: &[Action],
    ) -> Result<Var, ModelError> {
        let n = actions.len();
        if n == 0 {
            return Err(ModelError::EmptySet("target actions"));
        }
        let mut parts = Vec::with_capacity(3);
        match (c, self.uses_context()) {
            (Some(c), true) => parts.push(tape.repeat_rows(c, n)?),
            (None, false) => {}
            (Some(_), false) => {
                return Err(ModelError::Input("decoder takes no object latent".into()))
            }
            (None, true) => return Err(ModelError::Input("decoder needs an object latent".into())),
        }
        parts.push(tape.repeat_rows(c_a, n)?);
        parts.push(tape.constant(self.norm.action_matrix(actions)));
        let input = tape.concat(&parts)?;
        Ok(self.decoder.forward(tape, store, input)?)
    }

    /// `MSE + beta * (KL(q_full || N(0, I)) + KL(q_partial || stopgrad(q_full)))`
    /// with `c_a` drawn from the full posterior.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_action(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        actions: &[Action],
        rewards: &[f64],
        c: Option<Var>,
        rng: &mut RngStream,
        beta: f64,
        subset: SubsetSize,
    ) -> Result<ActionLoss, ModelError> {
        self.loss_action_anchored(tape, store, actions, rewards, c, rng, beta, subset, None)
    }

    /// As [`ActionModel::loss_action`], but with the matching-term anchor
    /// optionally computed from a frozen copy of the parameters. The
    /// stop-gradient loss has the same gradient as this anchored function,
    /// which makes it checkable by finite differences.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_action_anchored(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        actions: &[Action],
        rewards: &[f64],
        c: Option<Var>,
        rng: &mut RngStream,
        beta: f64,
        subset: SubsetSize,
        frozen: Option<&ParameterStore>,
    ) -> Result<ActionLoss, ModelError> {
        let n = actions.len();
        if n == 0 {
            return Err(ModelError::EmptySet("action-reward pairs"));
        }
        let full_emb = self.encode_actions(tape, store, actions, rewards)?;
        let q_full = self.aggregate(tape, store, &full_emb)?;

        let perm = rng.permutation(n);
        let m = match subset {
            SubsetSize::Random => 1 + rng.index(n),
            SubsetSize::Fixed(m) if (1..=n).contains(&m) => m,
            SubsetSize::Fixed(m) => {
                return Err(ModelError::Input(format!("subset size {m} outside 1..={n}")))
            }
        };
        // Keep the original order inside the subset so m = n reproduces the
        // full pass bit for bit.
        let mut chosen = perm[..m].to_vec();
        chosen.sort_unstable();
        let sub_a: Vec<Action> = chosen.iter().map(|&i| actions[i]).collect();
        let sub_r: Vec<f64> = chosen.iter().map(|&i| rewards[i]).collect();
        let part_emb = self.encode_actions(tape, store, &sub_a, &sub_r)?;
        let q_part = self.aggregate(tape, store, &part_emb)?;

        let c_a = q_full.sample(tape, rng)?;
        let pred = self.decode_reward(tape, store, c, c_a, actions)?;
        let target: Vec<f64> = rewards.iter().map(|&r| self.norm.reward(r)).collect();
        let target = tape.constant(Array::new(vec![n, 1], target)?);
        let mse = tape.mse(pred, target)?;

        let prior = GaussianVar::standard(tape, &[1, self.cfg.d_ca]);
        let kl_prior = q_full.kl(tape, &prior)?;
        let anchor = match frozen {
            None => q_full.detach(tape),
            Some(frozen) => {
                let mut side = Tape::new();
                let emb = self.encode_actions(&mut side, frozen, actions, rewards)?;
                let q = self.aggregate(&mut side, frozen, &emb)?;
                GaussianVar {
                    mean: tape.constant(side.value(q.mean).clone()),
                    log_var: tape.constant(side.value(q.log_var).clone()),
                }
            }
        };
        let kl_match = q_part.kl(tape, &anchor)?;
        let kl = tape.add(kl_prior, kl_match)?;
        let kl = tape.scale(kl, beta);
        let total = tape.add(mse, kl)?;
        Ok(ActionLoss {
            total,
            mse,
            kl_prior,
            kl_match,
        })
    }

    /// Rewards (raw units) for `targets` using posterior means for `c_a`.
    /// `c` is the object latent row, if the decoder takes one.
    pub fn predict_rewards(
        &self,
        store: &ParameterStore,
        c: Option<&[f64]>,
        observed: &[(Action, f64)],
        targets: &[Action],
    ) -> Result<Vec<f64>, ModelError> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let c = c.map(|c| tape.constant(Array::row(c.to_vec())));
        let (a, r): (Vec<Action>, Vec<f64>) = observed.iter().copied().unzip();
        let emb = self.encode_actions(&mut tape, store, &a, &r)?;
        let c_a = self.aggregate(&mut tape, store, &emb)?.mean;
        let pred = self.decode_reward(&mut tape, store, c, c_a, targets)?;
        Ok(tape
            .value(pred)
            .data()
            .iter()
            .map(|&p| self.norm.denormalize_reward(p))
            .collect())
    }
}

/// Mean of `q(c | X)` as a plain vector.
pub fn context_mean(
    ctx: &ContextLearner,
    store: &ParameterStore,
    images: &[Array],
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let c = ctx.context_mean(&mut tape, store, images)?;
    Ok(tape.value(c).data().to_vec())
}

/// Full prediction path: `c` from the images, `c_a` from the observed pairs,
/// then one decoded reward per target.
pub fn predict(
    ctx: &ContextLearner,
    act: &ActionModel,
    store: &ParameterStore,
    images: &[Array],
    observed: &[(Action, f64)],
    targets: &[Action],
) -> Result<Vec<f64>, ModelError> {
    let c = context_mean(ctx, store, images)?;
    act.predict_rewards(store, Some(&c), observed, targets)
}
