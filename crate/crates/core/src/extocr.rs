//! Runs an external OCR command per image and scores it through the same
//! records as the network.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charset::CharSet;
use crate::error::{Error, Result};
use crate::imaging::{binarize_otsu, crop, load_png, resize_area, rgb_to_bgr, save_png, CropBox, Image};
use crate::lprnet::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::metrics::PredictionRecord;

pub const INPUT_PLACEHOLDER: &str = "{input}";

fn default_timeout() -> u64 {
    10_000
}

fn default_concurrency() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineSpec {
    /// Shell-style command line; `{input}` is replaced by the image path.
    pub command_template: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Uppercase the output and drop characters outside `charset`.
    #[serde(default)]
    pub postprocess: bool,
    #[serde(default)]
    pub charset: CharSet,
    /// Maximum number of engine processes alive at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl EngineSpec {
    pub fn new(command_template: impl Into<String>) -> Result<Self> {
        let spec = EngineSpec {
            command_template: command_template.into(),
            timeout_ms: default_timeout(),
            postprocess: false,
            charset: CharSet::plates(),
            concurrency: default_concurrency(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.command_template.matches(INPUT_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Config(format!(
                "engine template must contain {INPUT_PLACEHOLDER} exactly once, found {n}"
            )));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("engine timeout must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("engine concurrency must be at least 1".into()));
        }
        self.argv(Path::new("x")).map(|_| ())
    }

    /// Program and arguments for one image.
    pub fn argv(&self, input: &Path) -> Result<Vec<String>> {
        let tokens = shlex::split(&self.command_template)
            .ok_or_else(|| Error::Config(format!("cannot tokenize engine template {:?}", self.command_template)))?;
        if tokens.is_empty() {
            return Err(Error::Config("engine template is empty".into()));
        }
        let path = input.to_string_lossy();
        Ok(tokens.into_iter().map(|t| t.replace(INPUT_PLACEHOLDER, &path)).collect())
    }

    /// Whether the program named by the template can be found.
    pub fn program_available(&self) -> bool {
        let Ok(argv) = self.argv(Path::new("x")) else {
            return false;
        };
        let prog = Path::new(&argv[0]);
        if prog.components().count() > 1 {
            return prog.is_file();
        }
        std::env::var_os("PATH")
            .map(|paths| std::env::split_paths(&paths).any(|d| d.join(prog).is_file()))
            .unwrap_or(false)
    }
}

pub fn normalize_output(raw: &str, spec: &EngineSpec) -> String {
    let trimmed = raw.trim();
    if spec.postprocess {
        trimmed
            .chars()
            .flat_map(char::to_uppercase)
            .filter(|c| spec.charset.contains(*c))
            .collect()
    } else {
        trimmed.to_string()
    }
}

fn drain(mut pipe: impl Read + Send + 'static) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

/// Runs the engine on one image and returns its normalized output. An empty
/// string means the engine produced nothing.
pub fn recognize_external(spec: &EngineSpec, image_path: &Path) -> Result<String> {
    spec.validate()?;
    if !image_path.exists() {
        return Err(Error::MissingPath(image_path.to_path_buf()));
    }
    let argv = spec.argv(image_path)?;
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Engine {
            status: format!("failed to start {:?}: {e}", argv[0]),
            stderr: String::new(),
        })?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));
    let deadline = Instant::now() + Duration::from_millis(spec.timeout_ms);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Timeout(spec.timeout_ms));
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::Engine {
            status: status.to_string(),
            stderr: String::from_utf8_lossy(&stderr).trim().to_string(),
        });
    }
    Ok(normalize_output(&String::from_utf8_lossy(&stdout), spec))
}

/// One step of the image pipeline applied before the engine sees a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PreprocessOp {
    Crop { roi: CropBox },
    Resize { width: usize, height: usize },
    Bgr,
    Binarize,
}

impl PreprocessOp {
    /// `crop`, `crop:l,t,r,b`, `resize`, `resize:WxH`, `bgr` or `binarize`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("cannot parse preprocessing step {s:?}"));
        match (name.trim().to_ascii_lowercase().as_str(), arg) {
            ("crop", None) => Ok(PreprocessOp::Crop { roi: CropBox::PLATE_ROI }),
            ("crop", Some(a)) => {
                let v: Vec<f64> = a.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if v.len() != 4 {
                    return Err(bad());
                }
                let roi = CropBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Config(e.to_string()))?;
                Ok(PreprocessOp::Crop { roi })
            }
            ("resize", None) => Ok(PreprocessOp::Resize {
                width: INPUT_WIDTH,
                height: INPUT_HEIGHT,
            }),
            ("resize", Some(a)) => {
                let (w, h) = a.split_once('x').ok_or_else(bad)?;
                Ok(PreprocessOp::Resize {
                    width: w.trim().parse().map_err(|_| bad())?,
                    height: h.trim().parse().map_err(|_| bad())?,
                })
            }
            ("bgr", None) => Ok(PreprocessOp::Bgr),
            ("binarize", None) => Ok(PreprocessOp::Binarize),
            _ => Err(bad()),
        }
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        match self {
            PreprocessOp::Crop { roi } => crop(image, roi),
            PreprocessOp::Resize { width, height } => resize_area(image, *width, *height),
            PreprocessOp::Bgr => Ok(rgb_to_bgr(image)),
            PreprocessOp::Binarize => Ok(binarize_otsu(image)),
        }
    }
}

pub fn preprocess(image: &Image, ops: &[PreprocessOp]) -> Result<Image> {
    let mut img = image.clone();
    for op in ops {
        img = op.apply(&img)?;
    }
    Ok(img)
}

/// Records in input order plus the failures that were recorded as empty
/// predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalBench {
    pub records: Vec<PredictionRecord>,
    pub failures: Vec<(String, String)>,
}

fn sample_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs the engine over `(image path, label)` samples. Preprocessed images
/// are written to a private temporary directory under their original file
/// name; with no preprocessing the source files are handed over as they
/// are. A failing sample becomes an empty prediction unless more than half
/// of the samples fail.
pub fn bench_external(spec: &EngineSpec, samples: &[(PathBuf, String)], ops: &[PreprocessOp]) -> Result<ExternalBench> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("no samples to benchmark".into()));
    }
    let scratch = tempfile::tempdir()?;
    let run_one = |(i, (path, _)): (usize, &(PathBuf, String))| -> Result<String> {
        let input = if ops.is_empty() {
            if !path.exists() {
                return Err(Error::MissingPath(path.clone()));
            }
            path.clone()
        } else {
            let img = preprocess(&load_png(path)?, ops)?;
            // one subdirectory per sample keeps repeated file names apart
            let dir = scratch.path().join(i.to_string());
            std::fs::create_dir(&dir)?;
            let out = dir.join(sample_id(path));
            save_png(&img, &out)?;
            out
        };
        recognize_external(spec, &input)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.concurrency)
        .build()
        .map_err(|e| Error::Config(format!("cannot start engine workers: {e}")))?;
    let results: Vec<Result<String>> = pool.install(|| samples.par_iter().enumerate().map(run_one).collect());

    let mut records = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    for ((path, label), result) in samples.iter().zip(results) {
        let id = sample_id(path);
        let predicted = match result {
            Ok(text) => text,
            Err(e) => {
                log::warn!("engine failed on {id}: {e}");
                failures.push((id.clone(), e.to_string()));
                String::new()
            }
        };
        records.push(PredictionRecord::new(label.clone(), predicted, id));
    }
    if failures.len() * 2 > samples.len() {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: samples.len(),
            first: failures[0].1.clone(),
        });
    }
    Ok(ExternalBench { records, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    fn spec_for(p: &Path) -> EngineSpec {
        EngineSpec::new(format!("{} {{input}}", p.display())).unwrap()
    }

    fn dummy_image(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        save_png(&Image::filled(120, 40, [0.9, 0.9, 0.9]).unwrap(), &p).unwrap();
        p
    }

    #[test]
    fn template_validation() {
        assert!(EngineSpec::new("tesseract {input} stdout").is_ok());
        assert!(EngineSpec::new("tesseract stdout").is_err());
        assert!(EngineSpec::new("cat {input} {input}").is_err());
        assert!(EngineSpec::new("echo 'unterminated {input}").is_err());
        let s = EngineSpec::new("ocr --in={input} -q").unwrap();
        assert_eq!(s.argv(Path::new("/a b.png")).unwrap(), vec!["ocr", "--in=/a b.png", "-q"]);
    }

    #[test]
    fn echo_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let img = dummy_image(dir.path(), "x.png");
        let fixed = script(dir.path(), "fixed.sh", "echo 34ABC12");
        assert_eq!(recognize_external(&spec_for(&fixed), &img).unwrap(), "34ABC12");
        let messy = script(dir.path(), "messy.sh", "printf ' 34abc-12\\n'");
        let mut spec = spec_for(&messy);
        assert_eq!(recognize_external(&spec, &img).unwrap(), "34abc-12");
        spec.postprocess = true;
        assert_eq!(recognize_external(&spec, &img).unwrap(), "34ABC12");
        let silent = script(dir.path(), "silent.sh", "true");
        assert_eq!(recognize_external(&spec_for(&silent), &img).unwrap(), "");
    }

    #[test]
    fn failures_and_timeouts() {
        let dir = tempfile::tempdir().unwrap();
        let img = dummy_image(dir.path(), "x.png");
        let bad = script(dir.path(), "bad.sh", "echo broken >&2; exit 3");
        match recognize_external(&spec_for(&bad), &img) {
            Err(Error::Engine { stderr, .. }) => assert_eq!(stderr, "broken"),
            other => panic!("{other:?}"),
        }
        let slow = script(dir.path(), "slow.sh", "sleep 5");
        let mut spec = spec_for(&slow);
        spec.timeout_ms = 100;
        let t = Instant::now();
        assert!(matches!(recognize_external(&spec, &img), Err(Error::Timeout(100))));
        assert!(t.elapsed() < Duration::from_secs(3));
        assert!(matches!(recognize_external(&spec_for(&bad), Path::new("/no/such.png")), Err(Error::MissingPath(_))));
    }

    #[test]
    fn preprocess_parsing() {
        assert_eq!(PreprocessOp::parse("crop").unwrap(), PreprocessOp::Crop { roi: CropBox::PLATE_ROI });
        assert_eq!(PreprocessOp::parse("resize:50x20").unwrap(), PreprocessOp::Resize { width: 50, height: 20 });
        assert_eq!(PreprocessOp::parse("BGR").unwrap(), PreprocessOp::Bgr);
        assert!(PreprocessOp::parse("crop:0,0,1").is_err());
        assert!(PreprocessOp::parse("blur").is_err());
        let ops: Vec<PreprocessOp> = ["crop:0,0,0.5,1", "resize:10x4", "binarize"].iter().map(|s| PreprocessOp::parse(s).unwrap()).collect();
        let out = preprocess(&Image::filled(100, 40, [0.2, 0.4, 0.6]).unwrap(), &ops).unwrap();
        assert_eq!((out.width(), out.height()), (10, 4));
    }

    #[test]
    fn bench_records_follow_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<(PathBuf, String)> = ["01BNU35_1.png", "38GVK61_2.png", "11AAA11_3.png"]
            .iter()
            .map(|n| (dummy_image(dir.path(), n), n.split('_').next().unwrap().to_string()))
            .collect();
        let reader = script(dir.path(), "reader.sh", "basename \"$1\" .png | sed 's/_[0-9]*$//'");
        let mut spec = spec_for(&reader);
        spec.concurrency = 3;
        for ops in [vec![], vec![PreprocessOp::parse("crop").unwrap(), PreprocessOp::Binarize]] {
            let bench = bench_external(&spec, &samples, &ops).unwrap();
            assert!(bench.failures.is_empty());
            let got: Vec<_> = bench.records.iter().map(|r| (r.predicted.as_str(), r.sample_id.as_str())).collect();
            assert_eq!(got, vec![("01BNU35", "01BNU35_1.png"), ("38GVK61", "38GVK61_2.png"), ("11AAA11", "11AAA11_3.png")]);
        }
        // sources untouched
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);
    }

    #[test]
    fn failure_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<(PathBuf, String)> = (0..4).map(|i| (dummy_image(dir.path(), &format!("A_{i}.png")), "A".to_string())).collect();
        let half = script(dir.path(), "half.sh", "case \"$1\" in *_0.png|*_1.png) exit 1;; esac; echo A");
        let bench = bench_external(&spec_for(&half), &samples, &[]).unwrap();
        assert_eq!(bench.records.len(), 4);
        assert_eq!(bench.failures.len(), 2);
        assert_eq!(bench.records[0].predicted, "");
        let worse = script(dir.path(), "worse.sh", "case \"$1\" in *_3.png) echo A;; *) exit 1;; esac");
        assert!(matches!(
            bench_external(&spec_for(&worse), &samples, &[]),
            Err(Error::TooManyFailures { failed: 3, total: 4, .. })
        ));
    }
}
