//! Flat `key=value` run configuration.
//!
//! Keys are `seed`, `gan.<field>` and `seg.<field>`. A config file holds one
//! assignment per line (`#` starts a comment); `--set` flags are applied on
//! top of the file, and `--seed` last of all.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use stdgan_core::segmentation::SegConfig;
use stdgan_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gan: TrainConfig,
    pub seg: SegConfig,
}

impl RunConfig {
    pub fn new(desk_scale: bool) -> Self {
        if desk_scale {
            RunConfig {
                seed: 0,
                gan: TrainConfig::desk(),
                seg: SegConfig::desk(),
            }
        } else {
            RunConfig {
                seed: 0,
                gan: TrainConfig::default(),
                seg: SegConfig::default(),
            }
        }
    }

    /// Builds the configuration from presets, an optional file, overrides
    /// and the seed flag, then validates both halves.
    pub fn resolve(
        desk_scale: bool,
        file: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut cfg = RunConfig::new(desk_scale);
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                cfg.assign(line)
                    .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
            }
        }
        for s in sets {
            cfg.assign(s).map_err(CliError::Usage)?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.gan.seed = cfg.seed;
        cfg.seg.seed = cfg.seed;
        cfg.gan
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.seg
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn assign(&mut self, assignment: &str) -> Result<(), String> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{assignment}`"))?;
        let (key, value) = (key.trim(), value.trim());
        let g = &mut self.gan;
        let s = &mut self.seg;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "gan.num_epochs" => g.num_epochs = parse(key, value)?,
            "gan.decay_epoch" => g.decay_epoch = parse(key, value)?,
            "gan.init_lr" => g.init_lr = parse(key, value)?,
            "gan.beta1" => g.beta1 = parse(key, value)?,
            "gan.beta2" => g.beta2 = parse(key, value)?,
            "gan.lambda1" => g.weights.lambda1 = parse(key, value)?,
            "gan.lambda2" => g.weights.lambda2 = parse(key, value)?,
            "gan.lambda3" => g.weights.lambda3 = parse(key, value)?,
            "gan.lambda4" => g.weights.lambda4 = parse(key, value)?,
            "gan.patch_size" => g.patch_size = parse(key, value)?,
            "gan.overlap" => g.overlap = parse(key, value)?,
            "gan.width" => g.width = parse(key, value)?,
            "seg.epochs" => s.epochs = parse(key, value)?,
            "seg.lr" => s.lr = parse(key, value)?,
            "seg.beta1" => s.beta1 = parse(key, value)?,
            "seg.beta2" => s.beta2 = parse(key, value)?,
            "seg.batch_size" => s.batch_size = parse(key, value)?,
            "seg.patch_size" => s.patch_size = parse(key, value)?,
            "seg.overlap" => s.overlap = parse(key, value)?,
            "seg.width" => s.width = parse(key, value)?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    /// The effective configuration in the file format.
    pub fn render(&self) -> String {
        let (g, s) = (&self.gan, &self.seg);
        format!(
            "seed={}\ngan.num_epochs={}\ngan.decay_epoch={}\ngan.init_lr={}\ngan.beta1={}\ngan.beta2={}\n\
             gan.lambda1={}\ngan.lambda2={}\ngan.lambda3={}\ngan.lambda4={}\ngan.patch_size={}\ngan.overlap={}\n\
             gan.width={}\nseg.epochs={}\nseg.lr={}\nseg.beta1={}\nseg.beta2={}\nseg.batch_size={}\n\
             seg.patch_size={}\nseg.overlap={}\nseg.width={}\n",
            self.seed,
            g.num_epochs,
            g.decay_epoch,
            g.init_lr,
            g.beta1,
            g.beta2,
            g.weights.lambda1,
            g.weights.lambda2,
            g.weights.lambda3,
            g.weights.lambda4,
            g.patch_size,
            g.overlap,
            g.width,
            s.epochs,
            s.lr,
            s.beta1,
            s.beta2,
            s.batch_size,
            s.patch_size,
            s.overlap,
            s.width
        )
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value `{value}` for `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(
            &file,
            "# desk tweaks\ngan.num_epochs = 4\nseed=3\nseg.lr=0.01 # faster\n",
        )
        .unwrap();
        let cfg =
            RunConfig::resolve(true, Some(&file), &["gan.num_epochs=6".into()], Some(9)).unwrap();
        assert_eq!(cfg.gan.num_epochs, 6);
        assert_eq!(cfg.seg.lr, 0.01);
        assert_eq!((cfg.seed, cfg.gan.seed, cfg.seg.seed), (9, 9, 9));
        assert_eq!(cfg.gan.width, 16);
    }

    #[test]
    fn rendering_round_trips() {
        let mut cfg = RunConfig::new(false);
        cfg.assign("gan.init_lr=0.0003").unwrap();
        let mut back = RunConfig::new(true);
        for line in cfg.render().lines() {
            back.assign(line).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_input_is_rejected_before_work() {
        let mut cfg = RunConfig::new(false);
        assert!(cfg.assign("gan.width").is_err());
        assert!(cfg.assign("gan.depth=3").is_err());
        assert!(cfg.assign("gan.width=-1").is_err());
        assert!(RunConfig::resolve(false, None, &["gan.decay_epoch=30".into()], None).is_err());
        assert!(RunConfig::resolve(false, None, &["seg.patch_size=100".into()], None).is_err());
    }
}
