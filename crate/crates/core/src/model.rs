//! Wires the conditioning branches, codec, and denoiser into one model and
//! derives each component's dimensions from the run configuration.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::assembly::{CanvasMode, Stage};
use crate::checkpoint::{self, CheckpointMeta};
use crate::codec::Codec;
use crate::config::FullConfig;
use crate::datagen::Category;
use crate::denoiser::{ConditioningMode, Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::params::{ParamStore, Scope};
use crate::sam::{SamConfig, SemanticAbstraction};
use crate::srm::{SpatialRefinement, SrmConfig, SrmOutput};

/// Everything the denoiser consumes about the reference image.
pub struct Conditioning {
    pub f_sam: Tensor,
    pub srm: Option<SrmOutput>,
}

pub struct Model {
    canvas: CanvasMode,
    extended: bool,
    pub codec: Codec,
    pub sam: SemanticAbstraction,
    /// Absent when extended attention is disabled; the mask head goes with
    /// it.
    pub srm: Option<SpatialRefinement>,
    pub denoiser: Denoiser,
}

/// Latent channel count at the codec's compression factor.
pub fn latent_channels(factor: usize) -> usize {
    3 * factor * factor
}

fn sam_config(cfg: &FullConfig) -> SamConfig {
    SamConfig {
        d: cfg.model.d,
        n_queries: cfg.model.sam_queries,
        cat_tokens: cfg.model.cat_tokens,
        depth: cfg.model.sam_depth,
        heads: cfg.model.heads,
        patch: 16,
    }
}

fn srm_config(cfg: &FullConfig) -> SrmConfig {
    let (h1, w1) = (cfg.data.image_h / 4, cfg.data.image_w / 4);
    let out_dims = match cfg.model.canvas {
        CanvasMode::PairConcat => [(h1, 2 * w1), (h1 / 2, w1), (h1 / 4, w1 / 2)],
        CanvasMode::ActiveOnly => [(h1, w1), (h1 / 2, w1 / 2), (h1 / 4, w1 / 4)],
    };
    SrmConfig {
        d: cfg.model.d,
        k_queries: cfg.model.srm_queries,
        n_semantic: cfg.model.sam_queries,
        units: cfg.model.srm_units,
        heads: cfg.model.heads,
        mask_threshold: 0.5,
        image_h: cfg.data.image_h,
        image_w: cfg.data.image_w,
        out_widths: cfg.model.unet_widths,
        out_dims,
    }
}

fn denoiser_config(cfg: &FullConfig) -> DenoiserConfig {
    let c = latent_channels(cfg.codec.factor);
    let f = cfg.codec.factor;
    let (lh, lw) = (cfg.data.image_h / f, cfg.data.image_w / f);
    // the channel order (noised target, guidance, mask) is the same in
    // both canvas modes; dropping the reference half only narrows the grid
    let latent_w = match cfg.model.canvas {
        CanvasMode::PairConcat => 2 * lw,
        CanvasMode::ActiveOnly => lw,
    };
    DenoiserConfig {
        in_channels: 2 * c + 1,
        out_channels: c,
        widths: cfg.model.unet_widths,
        head_dim: cfg.model.head_dim,
        groups: cfg.model.groups,
        context_dim: cfg.model.d,
        max_timestep: cfg.diffusion.train_steps,
        latent_h: lh,
        latent_w,
    }
}

impl Model {
    pub fn new(cfg: &FullConfig, scope: &Scope) -> Result<Model> {
        cfg.validate()?;
        let codec = Codec::with_affine(cfg.codec.factor, cfg.codec.scale, cfg.codec.shift)?;
        let sam = SemanticAbstraction::new(sam_config(cfg), scope)?;
        let srm = if cfg.model.extended_attention {
            Some(SpatialRefinement::new(
                srm_config(cfg),
                scope,
                cfg.model.head_dim,
            )?)
        } else {
            None
        };
        let denoiser = Denoiser::new(denoiser_config(cfg), scope)?;
        Ok(Model {
            canvas: cfg.model.canvas,
            extended: cfg.model.extended_attention,
            codec,
            sam,
            srm,
            denoiser,
        })
    }

    /// Rebuilds a trained model from a checkpoint: the stored config text
    /// defines the architecture and every tensor must be claimed by it.
    pub fn from_checkpoint(
        path: &Path,
        device: &Device,
    ) -> Result<(Model, ParamStore, FullConfig, CheckpointMeta)> {
        let loaded = checkpoint::load(path, device)?;
        let cfg = FullConfig::parse(&loaded.meta.config)?;
        let store =
            ParamStore::with_loaded(cfg.train.seed, DType::F32, device.clone(), loaded.tensors);
        let model = Model::new(&cfg, &store.root())?;
        store.finish_load()?;
        Ok((model, store, cfg, loaded.meta))
    }

    pub fn canvas_mode(&self) -> CanvasMode {
        self.canvas
    }

    pub fn has_spatial_branch(&self) -> bool {
        self.srm.is_some()
    }

    /// How the denoiser is conditioned at each point of the protocol: the
    /// spatial branch only feeds attention from stage 2 on, and only when
    /// present.
    pub fn conditioning_mode(&self, stage: Stage) -> ConditioningMode {
        match stage {
            Stage::Stage1 => ConditioningMode::SamOnly,
            Stage::Stage2 | Stage::Inference => {
                if self.extended {
                    ConditioningMode::SamAndSrm
                } else {
                    ConditioningMode::SamOnly
                }
            }
        }
    }

    /// Runs the conditioning branches once per reference image. The
    /// spatial branch runs whenever it exists and is wanted; its mask head
    /// is supervised even in the stage where attention ignores it.
    pub fn condition(
        &self,
        x_ref: &Tensor,
        cats: &[Category],
        with_spatial: bool,
    ) -> Result<Conditioning> {
        let sam_out = self.sam.forward(x_ref, cats)?;
        let srm = match (&self.srm, with_spatial) {
            (Some(srm), true) => Some(srm.run(x_ref, &sam_out.f_qf)?),
            _ => None,
        };
        Ok(Conditioning {
            f_sam: sam_out.f_sam,
            srm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn derived_dimensions_fit_together() -> Result<()> {
        let cfg = FullConfig::default();
        assert_eq!(latent_channels(cfg.codec.factor), 48);
        let dn = denoiser_config(&cfg);
        assert_eq!(dn.in_channels, 97);
        assert_eq!((dn.latent_h, dn.latent_w), (16, 24));
        assert_eq!(dn.attention_resolutions(), [(16, 24), (8, 12), (4, 6)]);
        let srm = srm_config(&cfg);
        assert_eq!(srm.out_dims, [(16, 24), (8, 12), (4, 6)]);
        assert_eq!(srm.out_widths, dn.widths);

        let mut single = FullConfig::default();
        crate::config::Variant::NoSpatialConcat.apply(&mut single);
        let dn = denoiser_config(&single);
        assert_eq!(dn.in_channels, 97);
        assert_eq!((dn.latent_h, dn.latent_w), (16, 12));
        assert_eq!(srm_config(&single).out_dims, [(16, 12), (8, 6), (4, 3)]);
        Ok(())
    }

    #[test]
    fn spatial_branch_follows_the_switch() -> Result<()> {
        let store = ParamStore::new(5, DType::F32, Device::Cpu);
        let model = Model::new(&FullConfig::default(), &store.root())?;
        assert!(model.has_spatial_branch());
        assert_eq!(
            model.conditioning_mode(Stage::Stage1),
            ConditioningMode::SamOnly
        );
        assert_eq!(
            model.conditioning_mode(Stage::Stage2),
            ConditioningMode::SamAndSrm
        );

        let mut ablated = FullConfig::default();
        crate::config::Variant::NoSrm.apply(&mut ablated);
        let store2 = ParamStore::new(5, DType::F32, Device::Cpu);
        let model2 = Model::new(&ablated, &store2.root())?;
        assert!(!model2.has_spatial_branch());
        assert_eq!(
            model2.conditioning_mode(Stage::Stage2),
            ConditioningMode::SamOnly
        );
        assert!(store2.var_names().len() < store.var_names().len());
        Ok(())
    }

    #[test]
    fn conditioning_shapes_feed_the_denoiser() -> Result<()> {
        let store = ParamStore::new(6, DType::F32, Device::Cpu);
        let cfg = FullConfig::default();
        let model = Model::new(&cfg, &store.root())?;
        let dev = Device::Cpu;
        let mut r = crate::rng::rng_for(6, &[9]);
        let x_ref = crate::rng::normal_tensor(&mut r, &[2, 3, 64, 48], DType::F32, &dev)?;
        let cond = model.condition(&x_ref, &[Category::Upper, Category::Dress], true)?;
        assert_eq!(cond.f_sam.dims(), &[2, 9, 128]);
        let srm = cond.srm.as_ref().unwrap();
        assert_eq!(srm.features.scales.len(), 3);
        assert_eq!(srm.tfq0.dims(), &[2, 1, 16, 12]);

        let input = crate::rng::normal_tensor(&mut r, &[2, 97, 16, 24], DType::F32, &dev)?;
        let eps = model.denoiser.forward(
            &input,
            &[3, 700],
            &cond.f_sam,
            Some(&srm.features),
            ConditioningMode::SamAndSrm,
        )?;
        assert_eq!(eps.dims(), &[2, 48, 16, 24]);
        Ok(())
    }
}
