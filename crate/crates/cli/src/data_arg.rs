//! `--data` argument syntax.
//!
//! - `blobs:k=10,dim=32,per_class=500,spread=0.08,seed=1[,stream=0][,radius=1]`
//! - `idx:IMAGES,LABELS[,per_class=N][,skip=N]`
//! - `csv:PATH[,per_class=N][,skip=N]` or a bare path ending in `.csv`

use std::path::{Path, PathBuf};

use adaloc::data::{gen_blobs, load_csv, load_idx, BlobsConfig, Dataset, Split};
use adaloc::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataArg {
    Blobs(BlobsConfig),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        per_class: Option<usize>,
        skip: usize,
    },
    Csv {
        path: PathBuf,
        per_class: Option<usize>,
        skip: usize,
    },
}

fn bad(s: &str, why: impl std::fmt::Display) -> Error {
    Error::Validation(format!("--data `{s}`: {why}"))
}

fn num<T: std::str::FromStr>(s: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(s, format!("{key}={v}: {e}")))
}

fn options<'a>(s: &str, parts: impl Iterator<Item = &'a str>) -> Result<Vec<(&'a str, &'a str)>> {
    parts
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| bad(s, format!("expected key=value, got `{p}`")))
        })
        .collect()
}

fn window(s: &str, opts: &[(&str, &str)]) -> Result<(Option<usize>, usize)> {
    let (mut per_class, mut skip) = (None, 0);
    for &(k, v) in opts {
        match k {
            "per_class" => per_class = Some(num(s, k, v)?),
            "skip" => skip = num(s, k, v)?,
            _ => return Err(bad(s, format!("unknown option `{k}`"))),
        }
    }
    Ok((per_class, skip))
}

impl std::str::FromStr for DataArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("blobs:") {
            let mut cfg = BlobsConfig::new(10, 32, 500, 0.08, 0);
            for (k, v) in options(s, rest.split(',').filter(|p| !p.is_empty()))? {
                match k {
                    "k" | "classes" => cfg.class_count = num(s, k, v)?,
                    "dim" => cfg.dim = num(s, k, v)?,
                    "per_class" => cfg.per_class = num(s, k, v)?,
                    "spread" => cfg.spread = num(s, k, v)?,
                    "seed" => cfg.seed = num(s, k, v)?,
                    "stream" => cfg.stream = num(s, k, v)?,
                    "radius" => cfg.radius = num(s, k, v)?,
                    _ => return Err(bad(s, format!("unknown blobs option `{k}`"))),
                }
            }
            return Ok(DataArg::Blobs(cfg));
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            let mut parts = rest.split(',');
            let (Some(images), Some(labels)) = (parts.next(), parts.next()) else {
                return Err(bad(s, "expected idx:IMAGES,LABELS"));
            };
            let (per_class, skip) = window(s, &options(s, parts)?)?;
            return Ok(DataArg::Idx {
                images: images.into(),
                labels: labels.into(),
                per_class,
                skip,
            });
        }
        let rest = s
            .strip_prefix("csv:")
            .or_else(|| s.ends_with(".csv").then_some(s));
        if let Some(rest) = rest {
            let mut parts = rest.split(',');
            let path = parts.next().unwrap_or_default();
            let (per_class, skip) = window(s, &options(s, parts)?)?;
            return Ok(DataArg::Csv {
                path: path.into(),
                per_class,
                skip,
            });
        }
        Err(bad(s, "expected blobs:..., idx:... or csv:..."))
    }
}

impl DataArg {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let cut = |d: Dataset, per_class: Option<usize>, skip: usize| match per_class {
            Some(n) => d.stratified(n, skip),
            None => Ok(d),
        };
        match self {
            DataArg::Blobs(cfg) => gen_blobs(cfg, split),
            DataArg::Idx {
                images,
                labels,
                per_class,
                skip,
            } => cut(load_idx(images, labels, split)?, *per_class, *skip),
            DataArg::Csv {
                path,
                per_class,
                skip,
            } => cut(load_csv(Path::new(path), None, split)?, *per_class, *skip),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_form() {
        let b: DataArg = "blobs:k=3,dim=4,per_class=7,spread=0.2,seed=9,stream=1"
            .parse()
            .unwrap();
        let DataArg::Blobs(cfg) = b else { panic!() };
        assert_eq!(
            (
                cfg.class_count,
                cfg.dim,
                cfg.per_class,
                cfg.seed,
                cfg.stream
            ),
            (3, 4, 7, 9, 1)
        );

        let i: DataArg = "idx:a.gz,b.gz,per_class=200,skip=400".parse().unwrap();
        assert_eq!(
            i,
            DataArg::Idx {
                images: "a.gz".into(),
                labels: "b.gz".into(),
                per_class: Some(200),
                skip: 400
            }
        );
        let c: DataArg = "train.csv".parse().unwrap();
        assert!(matches!(
            c,
            DataArg::Csv {
                per_class: None,
                ..
            }
        ));
    }

    #[test]
    fn rejects_garbage() {
        assert!("blobs:k=x".parse::<DataArg>().is_err());
        assert!("blobs:bogus=1".parse::<DataArg>().is_err());
        assert!("idx:only-one".parse::<DataArg>().is_err());
        assert!("something".parse::<DataArg>().is_err());
    }
}
