//! DCT heatmaps of an input and of every hourglass-entry feature, for the
//! clean input and an attacked copy.

use std::path::{Path, PathBuf};

use crate::attack::{basic_attack, AttackConfig, LossTarget};
use crate::backbone::{hourglass_entries, MaskStreams, SrModel};
use crate::dct::{annulus_mean, dct2, spectrum_heatmap};
use crate::error::Result;
use crate::io::save_image;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Radius above which heatmap values count as high frequency.
pub const HIGH_FREQUENCY_RADIUS: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPair {
    /// `input` or `hg<k>`.
    pub name: String,
    pub clean: Tensor,
    pub attacked: Tensor,
}

impl HeatmapPair {
    pub fn clean_high(&self) -> f64 {
        annulus_mean(&self.clean, HIGH_FREQUENCY_RADIUS)
    }

    pub fn attacked_high(&self) -> f64 {
        annulus_mean(&self.attacked, HIGH_FREQUENCY_RADIUS)
    }
}

/// Heatmaps for `image` and its attacked twin. The attack maximizes the
/// distance to the model's own clean output, since no ground truth is given.
pub fn dct_heatmaps(
    image: &Tensor,
    model: &SrModel,
    attack: &AttackConfig,
    seed: u64,
) -> Result<Vec<HeatmapPair>> {
    let root = RngStream::new(seed);
    let attack = AttackConfig {
        loss_target: LossTarget::CleanOutput,
        ..*attack
    };
    let placeholder = image.upsample_nearest(model.config.scale);
    let attacked = basic_attack(image, &placeholder, model, &attack, &root.split(0))?;

    let features = |x: &Tensor| -> Result<Vec<Tensor>> {
        let mut masks = MaskStreams::for_config(&root.split(1), &model.config);
        let mut v = vec![x.clone()];
        v.extend(hourglass_entries(
            x,
            &model.params,
            &model.config,
            false,
            &mut masks,
        )?);
        Ok(v)
    };
    let (fc, fa) = (features(image)?, features(&attacked)?);
    Ok(fc
        .iter()
        .zip(&fa)
        .enumerate()
        .map(|(k, (c, a))| HeatmapPair {
            name: if k == 0 {
                "input".into()
            } else {
                format!("hg{k}")
            },
            clean: spectrum_heatmap(&dct2(c)),
            attacked: spectrum_heatmap(&dct2(a)),
        })
        .collect())
}

/// Writes `<name>_clean.png` and `<name>_attacked.png` for every pair.
pub fn write_heatmaps(pairs: &[HeatmapPair], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| crate::error::Error::io(out, e))?;
    let mut files = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        for (tag, map) in [("clean", &p.clean), ("attacked", &p.attacked)] {
            let path = out.join(format!("{}_{tag}.png", p.name));
            save_image(map, &path)?;
            files.push(path);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams};

    fn model() -> SrModel {
        let cfg = BackboneConfig {
            base_channels: 4,
            ..Default::default()
        };
        SrModel::undefended(
            BackboneParams::init(&cfg, &mut RngStream::new(1)).unwrap(),
            cfg,
        )
    }

    #[test]
    fn file_count_matches_hourglasses() {
        let m = model();
        let img = crate::experiment::toy::toy_image(16, &mut RngStream::new(3));
        let pairs = dct_heatmaps(&img, &m, &AttackConfig::from_numerator(8, 3), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_heatmaps(&pairs, dir.path()).unwrap();
        assert_eq!(files.len(), 2 * (1 + m.config.num_hourglass));
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn constant_image_is_hot_only_at_dc() {
        let m = model();
        let img = Tensor::full(16, 16, 3, 0.4);
        let pairs = dct_heatmaps(&img, &m, &AttackConfig::from_numerator(0, 1), 0).unwrap();
        let h = &pairs[0].clean;
        assert_eq!(h.get(0, 0, 0), 1.0);
        assert!(h.data()[1..].iter().all(|&v| v < 1e-6));
    }
}
