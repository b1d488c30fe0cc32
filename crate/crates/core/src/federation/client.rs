use serde::{Deserialize, Serialize};

use super::method::{Assignment, HeadChoice, MethodBehavior};
use super::packet::GradientPacket;
use crate::clustering::{PrototypeReport, PrototypeSet, SoMap, SomClientReport};
use crate::data::{LabeledSample, StyledSample, UserData, UserDataset};
use crate::error::{FedError, Result};
use crate::model::{
    model_backward, Classifier, EmbeddingGradSource, LossSpec, ModelGrads, ModelParams,
    PersonalEmbedding, Targets,
};
use crate::nn::{flat, flat_mut, scale_all, AdamConfig, AdamState, Network, ParamTensors};
use crate::privacy::{privatize, privatize_joint, DpConfig};
use crate::seed::{stream_rng, stream_seed, streams};

/// Client-side training knobs shared by all users of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSettings {
    pub seed: u64,
    pub kway_weight: f64,
    pub embedding_source: EmbeddingGradSource,
    /// Local optimizer for the personal embedding.
    pub embed_optimizer: AdamConfig,
    /// Local optimizer for on-device heads.
    pub head_optimizer: AdamConfig,
    /// Plain step size of the triplet update.
    pub triplet_lr: f64,
    /// Weight of the proximal term pulling local heads toward the global head.
    pub proximal_lambda: f64,
    pub dp: DpConfig,
}

/// Everything a client keeps between rounds. None of it is ever sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub user_id: usize,
    /// Ground-truth sub-population (used by the type oracle and by metrics).
    pub subpop: usize,
    pub embedding: PersonalEmbedding,
    pub embed_opt: AdamState,
    pub local_head: Option<Network>,
    pub head_opt: Option<AdamState>,
    /// Index of the shared head this user currently uses.
    pub assignment: usize,
    pub data: UserDataset,
}

impl UserState {
    /// Fresh client state. Embeddings start uniform(0, 1) when the method
    /// trains them and at zero otherwise; local heads start as a copy of the
    /// global head.
    pub fn new(
        user: &UserData,
        params: &ModelParams,
        behavior: &MethodBehavior,
        settings: &ClientSettings,
    ) -> Self {
        let dim = params.embed_dim();
        let embedding = if behavior.embeddings {
            let mut rng = stream_rng(settings.seed, streams::EMBED_INIT, &[user.user_id as u64]);
            PersonalEmbedding::init(user.user_id, dim, &mut rng)
        } else {
            PersonalEmbedding::zeros(user.user_id, dim)
        };
        let local = behavior.head == HeadChoice::Local;
        let local_head = local.then(|| params.global_head.clone());
        let head_opt =
            local.then(|| AdamState::new(settings.head_optimizer, params.global_head.num_params()));
        let assignment = match behavior.head {
            HeadChoice::Shared(Assignment::Type) => user.subpop,
            _ => 0,
        };
        UserState {
            user_id: user.user_id,
            subpop: user.subpop,
            embedding,
            embed_opt: AdamState::new(settings.embed_optimizer, dim),
            local_head,
            head_opt,
            assignment,
            data: user.data.clone(),
        }
    }

    /// The classifier this user evaluates and trains with.
    pub fn classifier<'a>(&'a self, behavior: &MethodBehavior) -> Result<Classifier<'a>> {
        Ok(match behavior.head {
            HeadChoice::Global => Classifier::Global,
            HeadChoice::Shared(_) => Classifier::Subpop(self.assignment),
            HeadChoice::Local => Classifier::Local(self.local_head.as_ref().ok_or_else(|| {
                FedError::Usage(format!("user {} has no local head", self.user_id))
            })?),
        })
    }

    /// Style that dominates the user's positive training samples.
    pub fn positive_style(&self) -> Option<usize> {
        modal_style(self.data.train.iter().filter(|s| s.preference == 1))
    }
}

fn modal_style<'a>(samples: impl Iterator<Item = &'a LabeledSample>) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for s in samples {
        *counts.entry(s.style).or_insert(0usize) += 1;
    }
    // Highest count; lowest style on ties.
    counts
        .into_iter()
        .fold(
            None,
            |best: Option<(usize, usize)>, (style, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((style, c)),
            },
        )
        .map(|(s, _)| s)
}

/// Read-only view of the server state a client sees in one round.
#[derive(Debug, Clone, Copy)]
pub struct ClientContext<'a> {
    pub params: &'a ModelParams,
    pub pool: &'a [StyledSample],
    pub behavior: MethodBehavior,
    pub settings: &'a ClientSettings,
    pub prototypes: Option<&'a PrototypeSet>,
    pub som: Option<&'a SoMap>,
    pub round: usize,
}

/// Everything a client returns to the server after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutput {
    pub packet: GradientPacket,
    pub prototype_report: Option<PrototypeReport>,
    pub som_report: Option<SomClientReport>,
    /// Mean classification loss over the local training samples.
    pub loss: f64,
    /// The packet norm exceeded the clip bound.
    pub clipped: bool,
}

/// One client update: head selection, one pass over the local training
/// samples, local embedding and head steps, then the privacy mechanism.
pub fn client_round(user: &mut UserState, ctx: &ClientContext<'_>) -> Result<ClientOutput> {
    let params = ctx.params;
    let b = ctx.behavior;
    let s = ctx.settings;

    if let HeadChoice::Shared(Assignment::Prototype) = b.head {
        let protos = ctx
            .prototypes
            .ok_or_else(|| FedError::Config("prototype assignment needs a prototype set".into()))?;
        let pos = user.positive_style().ok_or_else(|| {
            FedError::Usage(format!("user {} has no positive samples", user.user_id))
        })?;
        if pos >= protos.len() {
            return Err(FedError::Config(format!(
                "positive style {pos} has no prototype ({} prototypes)",
                protos.len()
            )));
        }
        let mut rng = stream_rng(
            s.seed,
            streams::TRIPLET,
            &[ctx.round as u64, user.user_id as u64],
        );
        let neg = protos.sample_negative(pos, &mut rng);
        user.embedding.vector = crate::clustering::triplet_update(
            &user.embedding.vector,
            &protos.prototypes[pos],
            &protos.prototypes[neg],
            s.triplet_lr,
        );
        user.assignment = protos.assign(&user.embedding.vector);
    }
    if let HeadChoice::Shared(Assignment::EmbeddingSom) = b.head {
        if ctx.som.is_none() {
            return Err(FedError::Config("SOM assignment needs a SOM".into()));
        }
    }
    if let HeadChoice::Shared(_) = b.head {
        if user.assignment >= params.num_heads() {
            return Err(FedError::Usage(format!(
                "user {} assigned head {} of {}",
                user.user_id,
                user.assignment,
                params.num_heads()
            )));
        }
    }

    let spec = LossSpec {
        kway_weight: if b.kway { s.kway_weight } else { 0.0 },
        train_global_head: b.train_global_head,
        embedding: b.embeddings.then_some(s.embedding_source),
    };
    let local = b.head == HeadChoice::Local;
    let n = user.data.train.len().max(1) as f64;
    let mut grads = ModelGrads::zeros(params);
    let mut proto_grad = vec![0.0; params.embed_dim()];
    let mut loss = 0.0;
    // Under DP the local head joins the privatized gradient and steps once per round.
    let joint = local && s.dp.enabled && s.dp.local_heads;

    for sample in user.data.train.clone() {
        let x = &ctx.pool[sample.index].input;
        let targets = Targets {
            preference: sample.preference,
            style: sample.style,
        };
        if local && !joint {
            scale_all(&mut grads.classifier, 0.0);
        }
        let out = {
            let sel = user.classifier(&b)?;
            let bundle = params.forward(&user.embedding.vector, x, sel)?;
            model_backward(params, sel, &bundle, targets, &spec, &mut grads)?
        };
        loss += out.classify_loss;
        if local && !joint {
            let head = user.local_head.as_mut().expect("local head present");
            let opt = user
                .head_opt
                .as_mut()
                .expect("local head optimizer present");
            if b.proximal && s.proximal_lambda != 0.0 {
                // Gradient of (lambda / 2n) ||phi - nu||^2 for this sample.
                add_proximal(
                    &mut grads.classifier,
                    head,
                    &params.global_head,
                    s.proximal_lambda / n,
                );
            }
            opt.step(head.flat_params_mut(), flat(&grads.classifier))?;
        }
        if b.embeddings {
            user.embed_opt
                .step_slice(&mut user.embedding.vector, &out.embedding_grad)?;
            for (a, g) in proto_grad.iter_mut().zip(&out.embedding_grad) {
                *a += g;
            }
        }
    }

    let packet_id = stream_seed(
        s.seed,
        streams::PACKET_ID,
        &[ctx.round as u64, user.user_id as u64],
    );
    let mut packet = GradientPacket::zeros(params, ctx.round, packet_id);
    packet.encoder = grads.encoder;
    packet.kway = grads.kway;
    packet.global = grads.global;
    if let HeadChoice::Shared(_) = b.head {
        packet.heads[user.assignment] = std::mem::take(&mut grads.classifier);
    }
    if local && b.proximal && s.proximal_lambda != 0.0 {
        // The proximal term also pulls the global head toward this user's head.
        let head = user.local_head.as_ref().expect("local head present");
        for ((g, q), p) in flat_mut(&mut packet.global)
            .zip(params.global_head.flat_params())
            .zip(head.flat_params())
        {
            *g += s.proximal_lambda * (q - p);
        }
    }

    let mut rng = stream_rng(
        s.seed,
        streams::DP,
        &[user.user_id as u64, ctx.round as u64],
    );
    let clipped = if joint {
        let head = user.local_head.as_mut().expect("local head present");
        let mut head_grad = std::mem::take(&mut grads.classifier);
        if b.proximal && s.proximal_lambda != 0.0 {
            add_proximal(&mut head_grad, head, &params.global_head, s.proximal_lambda);
        }
        let clipped = privatize_joint(&mut packet, &mut head_grad, &s.dp, &mut rng)?;
        let opt = user
            .head_opt
            .as_mut()
            .expect("local head optimizer present");
        opt.step(head.flat_params_mut(), flat(&head_grad))?;
        clipped
    } else {
        privatize(&mut packet, &s.dp, &mut rng)?
    };

    let prototype_report = match b.head {
        HeadChoice::Shared(Assignment::Prototype) => Some(PrototypeReport {
            assigned: user.assignment,
            gradient: proto_grad,
        }),
        _ => None,
    };
    let som_report = match (b.head, ctx.som) {
        (HeadChoice::Shared(Assignment::EmbeddingSom), Some(som)) => {
            Some(som.client_step(&user.embedding.vector)?)
        }
        _ => None,
    };
    Ok(ClientOutput {
        packet,
        prototype_report,
        som_report,
        loss: loss / n,
        clipped,
    })
}

/// Adds `w * (phi - nu)` to a head gradient.
fn add_proximal(grad: &mut ParamTensors, head: &Network, global: &Network, w: f64) {
    for ((g, p), q) in flat_mut(grad)
        .zip(head.flat_params())
        .zip(global.flat_params())
    {
        *g += w * (p - q);
    }
}
