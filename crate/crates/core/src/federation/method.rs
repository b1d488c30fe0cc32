use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// The nine training approaches compared by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Global,
    GlobalPlus,
    #[serde(rename = "fedrep")]
    FedRep,
    #[serde(rename = "pfedme")]
    PFedMe,
    #[serde(rename = "pfedkm")]
    PFedKm,
    FedembedSom,
    FedembedPersonal,
    FedembedPrototype,
    FedembedType,
}

/// How a client picks the head that classifies its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadChoice {
    /// The global head, shared by everyone.
    Global,
    /// A head that lives on the client and is never transmitted.
    Local,
    /// One of the shared sub-population heads.
    Shared(Assignment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// SOM over personal embeddings.
    EmbeddingSom,
    /// Server-side SOM over flattened gradient packets.
    GradientSom,
    /// Triplet step then nearest prototype.
    Prototype,
    /// Ground-truth sub-population.
    Type,
}

/// What a method does on the client and server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodBehavior {
    pub head: HeadChoice,
    /// Personal embeddings are trained (otherwise they stay zero).
    pub embeddings: bool,
    /// The style objective contributes to encoder gradients.
    pub kway: bool,
    /// The global head is trained on the preference objective.
    pub train_global_head: bool,
    /// Local heads are pulled toward the global head with this weight.
    pub proximal: bool,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Global,
        Method::GlobalPlus,
        Method::FedRep,
        Method::PFedMe,
        Method::PFedKm,
        Method::FedembedSom,
        Method::FedembedPersonal,
        Method::FedembedPrototype,
        Method::FedembedType,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                FedError::Config(format!(
                    "unknown method '{name}' (known: {})",
                    known.join(", ")
                ))
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Global => "global",
            Method::GlobalPlus => "global-plus",
            Method::FedRep => "fedrep",
            Method::PFedMe => "pfedme",
            Method::PFedKm => "pfedkm",
            Method::FedembedSom => "fedembed-som",
            Method::FedembedPersonal => "fedembed-personal",
            Method::FedembedPrototype => "fedembed-prototype",
            Method::FedembedType => "fedembed-type",
        }
    }

    pub fn behavior(self) -> MethodBehavior {
        let base = MethodBehavior {
            head: HeadChoice::Global,
            embeddings: false,
            kway: false,
            train_global_head: false,
            proximal: false,
        };
        let fedembed = |head| MethodBehavior {
            head,
            embeddings: true,
            kway: true,
            train_global_head: true,
            proximal: false,
        };
        match self {
            Method::Global => MethodBehavior {
                train_global_head: true,
                ..base
            },
            Method::GlobalPlus => MethodBehavior {
                embeddings: true,
                train_global_head: true,
                ..base
            },
            Method::FedRep => MethodBehavior {
                head: HeadChoice::Local,
                ..base
            },
            Method::PFedMe => MethodBehavior {
                head: HeadChoice::Local,
                proximal: true,
                ..base
            },
            Method::PFedKm => MethodBehavior {
                head: HeadChoice::Shared(Assignment::GradientSom),
                ..base
            },
            Method::FedembedSom => fedembed(HeadChoice::Shared(Assignment::EmbeddingSom)),
            Method::FedembedPersonal => fedembed(HeadChoice::Local),
            Method::FedembedPrototype => fedembed(HeadChoice::Shared(Assignment::Prototype)),
            Method::FedembedType => fedembed(HeadChoice::Shared(Assignment::Type)),
        }
    }

    /// Number of shared sub-population heads the model needs.
    pub fn num_heads(self, subpops: usize, som_nodes: usize) -> usize {
        match self.behavior().head {
            HeadChoice::Shared(Assignment::EmbeddingSom | Assignment::GradientSom) => som_nodes,
            HeadChoice::Shared(_) => subpops,
            HeadChoice::Global | HeadChoice::Local => 1,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
