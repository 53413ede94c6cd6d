//! Pseudo-labeling backends.
//!
//! A backend answers one question: which of the class names fits this
//! sample. It is asked zero-shot when building the positive set and few-shot
//! (with clean demonstrations) when relabeling detected noisy samples.
//!
//! The cache file is JSON:
//!
//! ```json
//! {"format": "delora-relabel-cache", "version": 1,
//!  "zero_shot": {"<sample id>": "<class name>"},
//!  "few_shot": {"<sample id>": "<class name>"}}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::rng::Rng;

pub const ZERO_SHOT_TEMPLATE: &str = "Below is a text classification problem.\n\
Note that you can only select the label in {options}.\n\
Let's think step by step and give your answer.\n\
\n\
SENTENCE: {text}\n\
\n\
LABEL:";

/// Header of the few-shot prompt; each demonstration and then the query
/// follow as `SENTENCE:` / `LABEL:` blocks.
pub const FEW_SHOT_HEADER: &str = "Below is a text classification problem.\n\
Note that you can only select the label in {options}.\n\
Let's think step by step and give your answer.\n\
\n";

pub const DEFAULT_API_KEY_ENV: &str = "DELORA_API_KEY";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

#[derive(Clone, Debug)]
pub struct RelabelRequest<'a> {
    pub sample_id: &'a str,
    pub text: &'a str,
    pub options: &'a [String],
    /// Empty for zero-shot.
    pub demos: &'a [Demo],
    /// Only the synthetic oracle reads this.
    pub true_label: Option<usize>,
}

impl RelabelRequest<'_> {
    pub fn mode(&self) -> PromptMode {
        if self.demos.is_empty() {
            PromptMode::ZeroShot
        } else {
            PromptMode::FewShot
        }
    }

    fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::contract("relabel request without options"));
        }
        if let Some(d) = self.demos.iter().find(|d| d.label >= self.options.len()) {
            return Err(Error::contract(format!("demo label {} not among options", d.label)));
        }
        Ok(())
    }

    fn unavailable(&self, reason: impl Into<String>) -> Error {
        Error::PseudoLabelUnavailable {
            sample_id: self.sample_id.to_string(),
            reason: reason.into(),
        }
    }

    pub fn render_prompt(&self) -> String {
        let options = self.options.join(", ");
        match self.mode() {
            PromptMode::ZeroShot => ZERO_SHOT_TEMPLATE
                .replace("{options}", &options)
                .replacen("{text}", self.text, 1),
            PromptMode::FewShot => {
                let mut s = FEW_SHOT_HEADER.replace("{options}", &options);
                for d in self.demos {
                    s.push_str("SENTENCE: ");
                    s.push_str(&d.text);
                    s.push_str("\n\nLABEL: ");
                    s.push_str(&self.options[d.label]);
                    s.push_str("\n\n");
                }
                s.push_str("SENTENCE: ");
                s.push_str(self.text);
                s.push_str("\n\nLABEL:");
                s
            }
        }
    }
}

/// Index of the first option named after the last `LABEL:` marker (the whole
/// reply when there is no marker). Matching is case-insensitive and only on
/// whole words; at equal positions the longer option wins.
pub fn parse_label_reply(reply: &str, options: &[String]) -> Option<usize> {
    let lower = reply.to_lowercase();
    let tail = match lower.rfind("label:") {
        Some(p) => &lower[p + "label:".len()..],
        None => &lower[..],
    };
    let mut best: Option<(usize, usize, usize)> = None; // (position, length, index)
    for (idx, opt) in options.iter().enumerate() {
        let needle = opt.trim().to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(off) = tail[from..].find(&needle) {
            let start = from + off;
            let end = start + needle.len();
            let before_ok = tail[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after_ok = tail[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if before_ok && after_ok {
                let better = match best {
                    None => true,
                    Some((p, len, _)) => start < p || (start == p && needle.len() > len),
                };
                if better {
                    best = Some((start, needle.len(), idx));
                }
                break;
            }
            from = start + tail[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    best.map(|(_, _, idx)| idx)
}

pub trait RelabelBackend: Send + Sync {
    /// One label index into `req.options`.
    fn label(&self, req: &RelabelRequest<'_>) -> Result<usize>;

    /// Number of times the underlying labeler was actually consulted.
    fn backend_calls(&self) -> usize;
}

/// Zero-shot query.
pub fn pseudo_label(backend: &dyn RelabelBackend, req: &RelabelRequest<'_>) -> Result<usize> {
    req.validate()?;
    let zero = RelabelRequest { demos: &[], ..req.clone() };
    let y = backend.label(&zero)?;
    check_in_options(y, req)
}

/// Few-shot query. Falls back to zero-shot, with a warning, when there are no
/// demonstrations.
pub fn relabel_with_demos(backend: &dyn RelabelBackend, req: &RelabelRequest<'_>) -> Result<usize> {
    req.validate()?;
    if req.demos.is_empty() {
        log::warn!("no demonstrations for sample {}; asking zero-shot", req.sample_id);
    }
    let y = backend.label(req)?;
    check_in_options(y, req)
}

fn check_in_options(y: usize, req: &RelabelRequest<'_>) -> Result<usize> {
    if y >= req.options.len() {
        return Err(req.unavailable(format!("backend returned label {y} outside the options")));
    }
    Ok(y)
}

/// Up to `per_class` random clean samples per class, grouped by class in
/// index order of the class.
pub fn select_demos(dataset: &Dataset, clean: &[usize], per_class: usize, rng: &mut Rng) -> Result<Vec<Demo>> {
    if clean.is_empty() {
        return Err(Error::Degenerate("no clean samples to draw demonstrations from".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for &i in clean {
        by_class[dataset.sample(i).observed_label].push(i);
    }
    let mut demos = Vec::new();
    for (k, mut members) in by_class.into_iter().enumerate() {
        rng.shuffle(&mut members);
        for &i in members.iter().take(per_class) {
            demos.push(Demo {
                text: dataset.sample(i).prompt_text(),
                label: k,
            });
        }
    }
    Ok(demos)
}

/// Correct with probability `accuracy`, otherwise a uniformly random wrong
/// label. The draw depends only on the seed, the sample id and the prompt
/// mode, so answers are stable across calls and threads.
#[derive(Debug)]
pub struct SyntheticOracle {
    accuracy: f64,
    seed: u64,
    calls: AtomicUsize,
}

impl SyntheticOracle {
    pub fn new(accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::config(format!("oracle accuracy {accuracy} outside [0, 1]")));
        }
        Ok(SyntheticOracle {
            accuracy,
            seed,
            calls: AtomicUsize::new(0),
        })
    }
}

impl RelabelBackend for SyntheticOracle {
    fn label(&self, req: &RelabelRequest<'_>) -> Result<usize> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let truth = req
            .true_label
            .ok_or_else(|| req.unavailable("synthetic oracle needs the true label"))?;
        let tag = match req.mode() {
            PromptMode::ZeroShot => "oracle/zero-shot",
            PromptMode::FewShot => "oracle/few-shot",
        };
        let mut rng = Rng::derive(self.seed ^ fnv1a64(req.sample_id.as_bytes()), tag);
        if rng.bernoulli(self.accuracy) {
            Ok(truth)
        } else {
            Ok(rng.other_label(req.options.len(), truth))
        }
    }

    fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFile {
    format: String,
    version: u32,
    #[serde(default)]
    zero_shot: BTreeMap<String, String>,
    #[serde(default)]
    few_shot: BTreeMap<String, String>,
}

const CACHE_FORMAT: &str = "delora-relabel-cache";

/// Parses a cache document.
pub fn parse_cache(text: &str) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>)> {
    let c: CacheFile = serde_json::from_str(text)?;
    if c.format != CACHE_FORMAT || c.version != 1 {
        return Err(Error::config(format!(
            "unsupported cache format '{}' version {}",
            c.format, c.version
        )));
    }
    Ok((c.zero_shot, c.few_shot))
}

/// Answers from a JSON cache keyed by sample id. Misses go to the optional
/// fallback and are written through to disk.
pub struct CachedFile {
    path: PathBuf,
    state: Mutex<CacheFile>,
    fallback: Option<Box<dyn RelabelBackend>>,
}

impl CachedFile {
    /// A missing file starts an empty cache.
    pub fn open(path: impl Into<PathBuf>, fallback: Option<Box<dyn RelabelBackend>>) -> Result<Self> {
        let path = path.into();
        let state = match std::fs::read_to_string(&path) {
            Ok(text) => {
                let (zero_shot, few_shot) = parse_cache(&text)?;
                CacheFile {
                    format: CACHE_FORMAT.into(),
                    version: 1,
                    zero_shot,
                    few_shot,
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CacheFile {
                format: CACHE_FORMAT.into(),
                version: 1,
                ..Default::default()
            },
            Err(e) => return Err(Error::file(&path, e)),
        };
        Ok(CachedFile {
            path,
            state: Mutex::new(state),
            fallback,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        let s = self.state.lock().expect("cache lock");
        s.zero_shot.len() + s.few_shot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, state: &CacheFile) -> Result<()> {
        let tmp = self.path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(state)?;
        std::fs::write(&tmp, text).map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::file(&self.path, e))
    }
}

impl RelabelBackend for CachedFile {
    fn label(&self, req: &RelabelRequest<'_>) -> Result<usize> {
        let mode = req.mode();
        {
            let s = self.state.lock().expect("cache lock");
            let map = match mode {
                PromptMode::ZeroShot => &s.zero_shot,
                PromptMode::FewShot => &s.few_shot,
            };
            if let Some(name) = map.get(req.sample_id) {
                return req
                    .options
                    .iter()
                    .position(|o| o == name)
                    .ok_or_else(|| req.unavailable(format!("cached label '{name}' is not an option")));
            }
        }
        let fallback = self
            .fallback
            .as_ref()
            .ok_or_else(|| req.unavailable("not in cache and no fallback backend"))?;
        let y = check_in_options(fallback.label(req)?, req)?;
        let mut s = self.state.lock().expect("cache lock");
        let map = match mode {
            PromptMode::ZeroShot => &mut s.zero_shot,
            PromptMode::FewShot => &mut s.few_shot,
        };
        map.insert(req.sample_id.to_string(), req.options[y].clone());
        self.persist(&s)?;
        Ok(y)
    }

    fn backend_calls(&self) -> usize {
        self.fallback.as_ref().map_or(0, |f| f.backend_calls())
    }
}

/// POSTs `{"model", "prompt", "temperature": 0}` as JSON and parses the label
/// out of the reply. The reply may be plain text or JSON carrying the text in
/// `text`, `response`, `completion`, `output`, `choices[0].text` or
/// `choices[0].message.content`. A bearer token is sent when the configured
/// environment variable is set.
pub struct HttpLlm {
    endpoint: String,
    model: String,
    retries: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: u32,
}

impl HttpLlm {
    pub fn new(endpoint: &str, model: &str, timeout: Duration, retries: usize, api_key_env: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpLlm {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            retries,
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            agent,
            calls: AtomicUsize::new(0),
        }
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = HttpRequestBody {
            model: &self.model,
            prompt,
            temperature: 0,
        };
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP status {status}"));
        }
        Ok(extract_reply_text(&text))
    }
}

/// Pulls the completion text out of a JSON reply, or returns the body as is.
pub fn extract_reply_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.to_string();
    };
    let candidates = [
        v.get("text"),
        v.get("response"),
        v.get("completion"),
        v.get("output"),
        v.pointer("/choices/0/text"),
        v.pointer("/choices/0/message/content"),
    ];
    let found = candidates
        .into_iter()
        .flatten()
        .find_map(|c| c.as_str().map(str::to_string));
    found.unwrap_or_else(|| body.to_string())
}

impl RelabelBackend for HttpLlm {
    fn label(&self, req: &RelabelRequest<'_>) -> Result<usize> {
        let prompt = req.render_prompt();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(&prompt) {
                Ok(reply) => match parse_label_reply(&reply, req.options) {
                    Some(y) => return Ok(y),
                    None => last = format!("no option found in reply {reply:?}"),
                },
                Err(e) => last = e,
            }
            log::debug!("sample {} attempt {} failed: {last}", req.sample_id, attempt + 1);
        }
        Err(req.unavailable(last))
    }

    fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    SyntheticOracle {
        accuracy: f64,
        seed: u64,
    },
    CachedFile {
        path: PathBuf,
        #[serde(default)]
        fallback: Option<Box<BackendSpec>>,
    },
    HttpLlm {
        endpoint: String,
        model: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
        #[serde(default = "default_retries")]
        retries: usize,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_retries() -> usize {
    2
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackendSpec::SyntheticOracle { accuracy, .. } if !(0.0..=1.0).contains(accuracy) => {
                Err(Error::config(format!("oracle accuracy {accuracy} outside [0, 1]")))
            }
            BackendSpec::CachedFile { fallback: Some(f), .. } => f.validate(),
            BackendSpec::HttpLlm { timeout_secs, .. } if !(*timeout_secs > 0.0) => {
                Err(Error::config("HTTP timeout must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// `run_seed` is mixed into the oracle seed so repeated runs draw
    /// independent oracle errors.
    pub fn build(&self, run_seed: u64) -> Result<Box<dyn RelabelBackend>> {
        self.validate()?;
        Ok(match self {
            BackendSpec::SyntheticOracle { accuracy, seed } => Box::new(SyntheticOracle::new(
                *accuracy,
                seed ^ run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            )?),
            BackendSpec::CachedFile { path, fallback } => {
                let fb = fallback.as_ref().map(|f| f.build(run_seed)).transpose()?;
                Box::new(CachedFile::open(path.clone(), fb)?)
            }
            BackendSpec::HttpLlm {
                endpoint,
                model,
                timeout_secs,
                retries,
                api_key_env,
            } => Box::new(HttpLlm::new(
                endpoint,
                model,
                Duration::from_secs_f64(*timeout_secs),
                *retries,
                api_key_env,
            )),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn req<'a>(id: &'a str, options: &'a [String], demos: &'a [Demo], truth: Option<usize>) -> RelabelRequest<'a> {
        RelabelRequest {
            sample_id: id,
            text: "the movie was great",
            options,
            demos,
            true_label: truth,
        }
    }

    #[test]
    fn zero_shot_prompt_is_exact() {
        let o = opts(&["positive", "negative"]);
        let p = req("a", &o, &[], None).render_prompt();
        assert_eq!(
            p,
            "Below is a text classification problem.\nNote that you can only select the label in positive, negative.\nLet's think step by step and give your answer.\n\nSENTENCE: the movie was great\n\nLABEL:"
        );
    }

    #[test]
    fn few_shot_prompt_blocks() {
        let o = opts(&["positive", "negative"]);
        let demos = vec![
            Demo { text: "loved it".into(), label: 0 },
            Demo { text: "hated it".into(), label: 1 },
        ];
        let p = req("a", &o, &demos, None).render_prompt();
        assert_eq!(p.matches("SENTENCE:").count(), 3);
        assert_eq!(p.matches("LABEL:").count(), 3);
        assert!(p.contains("SENTENCE: loved it\n\nLABEL: positive\n\nSENTENCE: hated it\n\nLABEL: negative\n\nSENTENCE: the movie was great\n\nLABEL:"));
        assert!(p.ends_with("LABEL:"));
        let i = p.find("loved").unwrap();
        assert!(i < p.find("hated").unwrap());
    }

    #[test]
    fn reply_parsing() {
        let o = opts(&["positive", "negative", "neutral"]);
        assert_eq!(parse_label_reply("Thinking... LABEL: Negative", &o), Some(1));
        assert_eq!(
            parse_label_reply("LABEL: positive? no. Final LABEL: neutral, maybe negative", &o),
            Some(2)
        );
        assert_eq!(parse_label_reply("it is positive overall", &o), Some(0));
        assert_eq!(parse_label_reply("LABEL: unknown", &o), None);
        // whole words only
        assert_eq!(parse_label_reply("LABEL: nonpositive", &o), None);
        let o = opts(&["pos", "positive"]);
        assert_eq!(parse_label_reply("LABEL: positive", &o), Some(1));
        assert_eq!(parse_label_reply("", &o), None);
    }

    #[test]
    fn oracle_extremes_and_rate() {
        let o = opts(&["a", "b"]);
        let perfect = SyntheticOracle::new(1.0, 3).unwrap();
        let wrong = SyntheticOracle::new(0.0, 3).unwrap();
        for i in 0..200 {
            let id = format!("s{i}");
            let truth = i % 2;
            assert_eq!(pseudo_label(&perfect, &req(&id, &o, &[], Some(truth))).unwrap(), truth);
            assert_eq!(pseudo_label(&wrong, &req(&id, &o, &[], Some(truth))).unwrap(), 1 - truth);
        }
        let o4 = opts(&["a", "b", "c", "d"]);
        let oracle = SyntheticOracle::new(0.8, 11).unwrap();
        let n = 10_000;
        let agree = (0..n)
            .filter(|&i| {
                let id = format!("s{i}");
                pseudo_label(&oracle, &req(&id, &o4, &[], Some(i % 4))).unwrap() == i % 4
            })
            .count();
        assert!((agree as f64 / n as f64 - 0.8).abs() < 0.012);
        assert_eq!(oracle.backend_calls(), n);
    }

    #[test]
    fn oracle_is_stable_per_sample() {
        let o = opts(&["a", "b", "c"]);
        let oracle = SyntheticOracle::new(0.5, 1).unwrap();
        for i in 0..50 {
            let id = format!("x{i}");
            let a = pseudo_label(&oracle, &req(&id, &o, &[], Some(0))).unwrap();
            let b = pseudo_label(&oracle, &req(&id, &o, &[], Some(0))).unwrap();
            assert_eq!(a, b);
        }
        assert!(pseudo_label(&oracle, &req("x", &o, &[], None)).is_err());
    }

    #[test]
    fn cache_hits_skip_the_backend() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let o = opts(&["a", "b", "c"]);
        let cache = CachedFile::open(&path, Some(Box::new(SyntheticOracle::new(1.0, 0).unwrap()))).unwrap();
        assert_eq!(pseudo_label(&cache, &req("s1", &o, &[], Some(2))).unwrap(), 2);
        assert_eq!(cache.backend_calls(), 1);
        assert_eq!(pseudo_label(&cache, &req("s1", &o, &[], Some(2))).unwrap(), 2);
        assert_eq!(cache.backend_calls(), 1);

        // reopened without a fallback: served from disk
        let reopened = CachedFile::open(&path, None).unwrap();
        assert_eq!(pseudo_label(&reopened, &req("s1", &o, &[], Some(0))).unwrap(), 2);
        assert_eq!(reopened.backend_calls(), 0);
        match pseudo_label(&reopened, &req("s2", &o, &[], Some(0))) {
            Err(Error::PseudoLabelUnavailable { sample_id, .. }) => assert_eq!(sample_id, "s2"),
            other => panic!("{other:?}"),
        }
        let demos = [Demo { text: "t".into(), label: 0 }];
        assert!(relabel_with_demos(&reopened, &req("s1", &o, &demos, Some(0))).is_err());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"delora-relabel-cache\""));
    }

    #[test]
    fn cache_rejects_bad_documents() {
        assert!(parse_cache("{}").is_err());
        assert!(parse_cache(r#"{"format":"other","version":1}"#).is_err());
        assert!(parse_cache(r#"{"format":"delora-relabel-cache","version":1,"extra":1}"#).is_err());
        let (z, f) = parse_cache(r#"{"format":"delora-relabel-cache","version":1,"zero_shot":{"a":"x"}}"#).unwrap();
        assert_eq!(z.get("a").map(String::as_str), Some("x"));
        assert!(f.is_empty());
    }

    #[test]
    fn demo_selection() {
        let ds = crate::data::gen_gaussian_clusters(4, 4, 5, 3.0, 1).unwrap();
        let clean: Vec<usize> = (0..20).collect();
        let demos = select_demos(&ds, &clean, 1, &mut Rng::new(2)).unwrap();
        assert_eq!(demos.iter().map(|d| d.label).collect::<Vec<_>>(), [0, 1, 2, 3]);
        assert_eq!(demos, select_demos(&ds, &clean, 1, &mut Rng::new(2)).unwrap());
        // class 1 has no clean samples
        let partial: Vec<usize> = clean.iter().copied().filter(|&i| ds.sample(i).observed_label != 1).collect();
        let demos = select_demos(&ds, &partial, 2, &mut Rng::new(2)).unwrap();
        assert_eq!(demos.iter().map(|d| d.label).collect::<Vec<_>>(), [0, 0, 2, 2, 3, 3]);
        assert!(select_demos(&ds, &[], 1, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn reply_text_extraction() {
        assert_eq!(extract_reply_text("plain LABEL: a"), "plain LABEL: a");
        assert_eq!(extract_reply_text(r#"{"text":"LABEL: b"}"#), "LABEL: b");
        assert_eq!(extract_reply_text(r#"{"choices":[{"message":{"content":"c"}}]}"#), "c");
    }

    #[test]
    fn backend_spec_json() {
        let spec: BackendSpec = serde_json::from_str(r#"{"kind":"synthetic_oracle","accuracy":0.9,"seed":1}"#).unwrap();
        assert_eq!(spec, BackendSpec::SyntheticOracle { accuracy: 0.9, seed: 1 });
        assert!(serde_json::from_str::<BackendSpec>(r#"{"kind":"synthetic_oracle","accuracy":0.9,"seed":1,"x":0}"#).is_err());
        let bad = BackendSpec::SyntheticOracle { accuracy: 1.5, seed: 0 };
        assert!(bad.build(0).is_err());
        let http: BackendSpec = serde_json::from_str(r#"{"kind":"http_llm","endpoint":"http://localhost:1/","model":"m"}"#).unwrap();
        assert!(matches!(http, BackendSpec::HttpLlm { retries: 2, .. }));
    }
}
