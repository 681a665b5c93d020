//! Run configuration: a flat key=value file covering the model, the
//! training options, the denoiser bank, paths and the seed, with
//! command-line `--set key=value` overrides winning over the file.
//! Unknown keys are rejected; every run echoes the fully-resolved
//! configuration so the experiment record is complete.

use std::path::PathBuf;

use edlm::config::{parse_kv_text, render_kv_text, ModelConfig};
use edlm::error::{Error, Result};
use edlm::training::TrainOptions;
use edlm::ul2::{standard_bank, DenoiserSpec, MeanSpan, SpanPolicy};

#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub shards: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub vision_fixture: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub bank: Vec<DenoiserSpec>,
    pub bank_text: String,
    pub seed: u64,
    pub paths: Paths,
}

fn parse_bank(v: &str) -> Result<Vec<DenoiserSpec>> {
    if v == "standard" {
        return Ok(standard_bank());
    }
    v.split(';')
        .map(|part| {
            let f: Vec<&str> = part.split(':').collect();
            if f.len() != 4 {
                return Err(Error::config(format!(
                    "denoiser '{part}' must be mu:rate:policy:weight"
                )));
            }
            let mean_span = if f[0] == "3/4L" {
                MeanSpan::ThreeQuartersL
            } else {
                MeanSpan::Tokens(f[0].parse().map_err(|_| {
                    Error::config(format!("bad mean span '{}' in denoiser '{part}'", f[0]))
                })?)
            };
            let corruption_rate: f64 = f[1]
                .parse()
                .map_err(|_| Error::config(format!("bad rate '{}' in denoiser '{part}'", f[1])))?;
            let policy = match f[2] {
                "multi" => SpanPolicy::MultiSpan,
                "suffix" => SpanPolicy::SingleSuffix,
                other => {
                    return Err(Error::config(format!(
                        "policy '{other}' must be multi or suffix"
                    )))
                }
            };
            let weight: f64 = f[3]
                .parse()
                .map_err(|_| Error::config(format!("bad weight '{}' in denoiser '{part}'", f[3])))?;
            if !(corruption_rate > 0.0 && corruption_rate < 1.0) && policy == SpanPolicy::MultiSpan
            {
                return Err(Error::config(format!(
                    "corruption rate must lie in (0, 1), got {corruption_rate}"
                )));
            }
            Ok(DenoiserSpec {
                mean_span,
                corruption_rate,
                policy,
                weight,
            })
        })
        .collect()
}

impl RunConfig {
    /// Merge the config file (when given) with `--set key=value` overrides
    /// (overrides win), validate everything, reject unknown keys.
    pub fn resolve(file: Option<&std::path::Path>, sets: &[String]) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_kv_text(&text)?
            }
            None => Vec::new(),
        };
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                Error::config(format!("--set expects key=value, got '{s}'"))
            })?;
            let k = k.trim().to_string();
            let v = v.trim().to_string();
            if let Some(existing) = pairs.iter_mut().find(|(pk, _)| *pk == k) {
                existing.1 = v;
            } else {
                pairs.push((k, v));
            }
        }
        let mut bank_text = "standard".to_string();
        let mut seed = 0u64;
        let mut paths = Paths::default();
        for (k, v) in &pairs {
            match k.as_str() {
                "seed" => {
                    seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad seed '{v}'")))?
                }
                "data.denoisers" => bank_text = v.clone(),
                "paths.corpus" => paths.corpus = Some(PathBuf::from(v)),
                "paths.shards" => paths.shards = Some(PathBuf::from(v)),
                "paths.out_dir" => paths.out_dir = Some(PathBuf::from(v)),
                "paths.vision_fixture" => paths.vision_fixture = Some(PathBuf::from(v)),
                "paths.metrics" => paths.metrics = Some(PathBuf::from(v)),
                other if other.starts_with("model.") || other.starts_with("train.") => {}
                other => return Err(Error::config(format!("unknown config key '{other}'"))),
            }
        }
        let model = ModelConfig::from_kv(&pairs)?;
        let train = TrainOptions::from_kv(&pairs)?;
        train.validate()?;
        let bank = parse_bank(&bank_text)?;
        Ok(RunConfig {
            model,
            train,
            bank,
            bank_text,
            seed,
            paths,
        })
    }

    /// Fully-resolved configuration, canonical text form.
    pub fn resolved_kv(&self) -> String {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.push(("data.denoisers".to_string(), self.bank_text.clone()));
        kv.push(("seed".to_string(), self.seed.to_string()));
        let path_kv = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        kv.push(("paths.corpus".to_string(), path_kv(&self.paths.corpus)));
        kv.push(("paths.shards".to_string(), path_kv(&self.paths.shards)));
        kv.push(("paths.out_dir".to_string(), path_kv(&self.paths.out_dir)));
        kv.push((
            "paths.vision_fixture".to_string(),
            path_kv(&self.paths.vision_fixture),
        ));
        kv.push(("paths.metrics".to_string(), path_kv(&self.paths.metrics)));
        render_kv_text(&kv)
    }

    /// Echo the resolved config, one `CONFIG<TAB>key=value` line each.
    pub fn echo(&self) {
        for line in self.resolved_kv().lines() {
            println!("CONFIG\t{line}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let rc = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(rc.bank.len(), 5);
        assert_eq!(rc.seed, 0);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = std::env::temp_dir().join("edlm_runcfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "seed=7\nmodel.d_model=32\nmodel.d_head=8\n").unwrap();
        let rc = RunConfig::resolve(Some(&path), &["seed=9".to_string()]).unwrap();
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.model.d_model, 32);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::resolve(None, &["bogus.key=1".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::resolve(None, &["model.bogus=1".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn custom_bank_parses() {
        let rc = RunConfig::resolve(
            None,
            &["data.denoisers=3:0.15:multi:1;3/4L:0.75:suffix:4".to_string()],
        )
        .unwrap();
        assert_eq!(rc.bank.len(), 2);
        assert_eq!(rc.bank[1].policy, SpanPolicy::SingleSuffix);
        assert_eq!(rc.bank[1].mean_span, MeanSpan::ThreeQuartersL);
    }
}
