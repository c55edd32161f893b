use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::Discriminator;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::vit::{ModelConfig, VisionTransformer};

/// Backbone, classifier head and the two domain discriminators.
#[derive(Clone, Debug)]
pub struct TvtModel {
    pub vit: VisionTransformer,
    /// Patch-level discriminator, feeds the transferabilities.
    pub patch_disc: Discriminator,
    /// Discriminator on the final class-token state.
    pub global_disc: Discriminator,
}

pub const PATCH_DISC: &str = "disc_patch";
pub const GLOBAL_DISC: &str = "disc_global";

impl TvtModel {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vit = VisionTransformer::new(&mut store, &mut rng, config)?;
        let d = config.embed_dim;
        let patch_disc = Discriminator::new(&mut store, &mut rng, PATCH_DISC, d, config.init_std)?;
        let global_disc = Discriminator::new(&mut store, &mut rng, GLOBAL_DISC, d, config.init_std)?;
        Ok((
            TvtModel {
                vit,
                patch_disc,
                global_disc,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.vit.config
    }

    /// Whether a parameter belongs to one of the discriminators (downstream of
    /// the gradient reversal) rather than to the feature extractor or head.
    pub fn is_discriminator_param(store: &ParamStore, id: ParamId) -> bool {
        let name = store.name(id);
        name.starts_with(PATCH_DISC) || name.starts_with(GLOBAL_DISC)
    }
}
