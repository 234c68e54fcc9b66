use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vata_core::data::{load_comparisons, ImageManifest, ManifestImage};
use vata_core::{Indicator, PairwiseComparison, Side};

/// Comparisons each participant answers per indicator.
pub const TARGET_PER_INDICATOR: usize = 18;

type PairKey = (Indicator, usize, usize);

fn key(ind: Indicator, a: usize, b: usize) -> PairKey {
    (ind, a.min(b), a.max(b))
}

#[derive(Debug, Default, Clone)]
struct Participant {
    progress: HashMap<Indicator, usize>,
    answered: HashSet<PairKey>,
    served: HashSet<PairKey>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServedPair {
    pub indicator: Indicator,
    pub left: String,
    pub right: String,
    pub left_url: String,
    pub right_url: String,
    pub question_text: String,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Rejection {
    UnknownParticipant,
    UnknownImage(String),
    BadWinner,
    Complete(BTreeMap<String, usize>),
    NotServed,
    AlreadyAnswered,
    Exhausted,
    Io(String),
}

/// Everything the service knows, rebuilt from the manifest and the log.
pub struct SurveyState {
    images: Vec<ManifestImage>,
    index: HashMap<String, usize>,
    exposure: HashMap<Indicator, Vec<u64>>,
    participants: HashMap<String, Participant>,
    log: Vec<PairwiseComparison>,
    per_indicator: HashMap<Indicator, usize>,
    log_file: Option<File>,
    seed: u64,
    requests: u64,
}

/// Comparable view of the persistent part of the state.
#[derive(Debug, PartialEq, Eq)]
pub struct StateDigest {
    pub exposure: BTreeMap<String, Vec<u64>>,
    pub progress: BTreeMap<String, BTreeMap<String, usize>>,
    pub answered: BTreeMap<String, Vec<(String, usize, usize)>>,
    pub log_len: usize,
}

impl SurveyState {
    /// Replays `log_path` if it exists; new responses are appended to it.
    pub fn open(manifest: ImageManifest, log_path: &Path, seed: u64) -> vata_core::Result<SurveyState> {
        let log = if log_path.exists() {
            load_comparisons(log_path)?
        } else {
            Vec::new()
        };
        let mut state = SurveyState::in_memory(manifest, seed)?;
        for c in log {
            state.replay(c)?;
        }
        state.log_file = Some(OpenOptions::new().create(true).append(true).open(log_path)?);
        Ok(state)
    }

    /// State without a backing file; used by tests and dry runs.
    pub fn in_memory(manifest: ImageManifest, seed: u64) -> vata_core::Result<SurveyState> {
        manifest.validate()?;
        let index = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, m)| (m.image_id.clone(), i))
            .collect();
        let n = manifest.images.len();
        Ok(SurveyState {
            images: manifest.images,
            index,
            exposure: Indicator::all().into_iter().map(|i| (i, vec![0; n])).collect(),
            participants: HashMap::new(),
            log: Vec::new(),
            per_indicator: HashMap::new(),
            log_file: None,
            seed,
            requests: 0,
        })
    }

    fn lookup(&self, id: &str) -> Result<usize, Rejection> {
        self.index.get(id).copied().ok_or_else(|| Rejection::UnknownImage(id.to_string()))
    }

    fn replay(&mut self, c: PairwiseComparison) -> vata_core::Result<()> {
        let a = self.lookup(&c.left_id).map_err(|_| vata_core::Error::UnknownImage(c.left_id.clone()))?;
        let b = self.lookup(&c.right_id).map_err(|_| vata_core::Error::UnknownImage(c.right_id.clone()))?;
        let p = self.participants.entry(c.participant_id.clone()).or_default();
        if !p.answered.insert(key(c.indicator, a, b)) {
            log::warn!("log repeats pair {}/{} for {}", c.left_id, c.right_id, c.participant_id);
        }
        *p.progress.entry(c.indicator).or_default() += 1;
        let exp = self.exposure.get_mut(&c.indicator).expect("every indicator tracked");
        exp[a] += 1;
        exp[b] += 1;
        *self.per_indicator.entry(c.indicator).or_default() += 1;
        self.log.push(c);
        Ok(())
    }

    /// Registers a participant; returns false if already known.
    pub fn register(&mut self, participant: &str) -> bool {
        if self.participants.contains_key(participant) {
            return false;
        }
        self.participants.insert(participant.to_string(), Participant::default());
        true
    }

    pub fn is_registered(&self, participant: &str) -> bool {
        self.participants.contains_key(participant)
    }

    pub fn progress(&self, participant: &str) -> Option<BTreeMap<String, usize>> {
        let p = self.participants.get(participant)?;
        Some(
            Indicator::all()
                .into_iter()
                .map(|i| (i.name().to_string(), p.progress.get(&i).copied().unwrap_or(0)))
                .collect(),
        )
    }

    /// Picks the least-exposed pair this participant has not answered; ties
    /// are broken by a per-request seeded shuffle.
    pub fn next_pair(&mut self, indicator: Indicator, participant: &str) -> Result<ServedPair, Rejection> {
        let progress = self.progress(participant).ok_or(Rejection::UnknownParticipant)?;
        if progress[indicator.name()] >= TARGET_PER_INDICATOR {
            return Err(Rejection::Complete(progress));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.requests);
        self.requests += 1;

        let exp = &self.exposure[&indicator];
        let n = self.images.len();
        let tiebreak: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (exp[i], tiebreak[i]));

        let answered = &self.participants[participant].answered;
        let pair = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .map(|(a, b)| (order[a], order[b]))
            .find(|&(x, y)| !answered.contains(&key(indicator, x, y)))
            .ok_or(Rejection::Exhausted)?;
        let (left, right) = if rng.random::<bool>() { pair } else { (pair.1, pair.0) };

        let exp = self.exposure.get_mut(&indicator).expect("every indicator tracked");
        exp[left] += 1;
        exp[right] += 1;
        self.participants
            .get_mut(participant)
            .expect("checked above")
            .served
            .insert(key(indicator, left, right));
        Ok(ServedPair {
            indicator,
            left: self.images[left].image_id.clone(),
            right: self.images[right].image_id.clone(),
            left_url: self.images[left].url.clone(),
            right_url: self.images[right].url.clone(),
            question_text: indicator.question_text(),
        })
    }

    /// Validates and appends one response; returns the new progress count.
    pub fn record(
        &mut self,
        indicator: Indicator,
        left: &str,
        right: &str,
        winner: &str,
        participant: &str,
    ) -> Result<usize, Rejection> {
        let side = if winner == left {
            Side::Left
        } else if winner == right {
            Side::Right
        } else {
            return Err(Rejection::BadWinner);
        };
        let a = self.lookup(left)?;
        let b = self.lookup(right)?;
        if a == b {
            return Err(Rejection::BadWinner);
        }
        let progress = self.progress(participant).ok_or(Rejection::UnknownParticipant)?;
        let k = key(indicator, a, b);
        let p = &self.participants[participant];
        if p.answered.contains(&k) {
            return Err(Rejection::AlreadyAnswered);
        }
        if !p.served.contains(&k) {
            return Err(Rejection::NotServed);
        }
        if progress[indicator.name()] >= TARGET_PER_INDICATOR {
            return Err(Rejection::Complete(progress));
        }
        let c = PairwiseComparison {
            indicator,
            left_id: left.to_string(),
            right_id: right.to_string(),
            winner: side,
            participant_id: participant.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        if let Some(f) = self.log_file.as_mut() {
            let line = format!("{}\n", c.to_json_line());
            f.write_all(line.as_bytes()).map_err(|e| Rejection::Io(e.to_string()))?;
        }
        let p = self.participants.get_mut(participant).expect("checked above");
        p.served.remove(&k);
        p.answered.insert(k);
        let count = p.progress.entry(indicator).or_default();
        *count += 1;
        let count = *count;
        *self.per_indicator.entry(indicator).or_default() += 1;
        self.log.push(c);
        Ok(count)
    }

    pub fn comparison_count(&self, indicator: Indicator) -> usize {
        self.per_indicator.get(&indicator).copied().unwrap_or(0)
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn comparisons(&self, indicator: Indicator) -> Vec<PairwiseComparison> {
        self.log.iter().filter(|c| c.indicator == indicator).cloned().collect()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|m| m.image_id.clone()).collect()
    }

    pub fn exposure(&self, indicator: Indicator) -> &[u64] {
        &self.exposure[&indicator]
    }

    /// Persistent state only: served-but-unanswered pairs live in memory and
    /// are deliberately left out.
    pub fn digest(&self) -> StateDigest {
        let mut exposure = BTreeMap::new();
        for c in &self.log {
            exposure
                .entry(c.indicator.name().to_string())
                .or_insert_with(|| vec![0; self.images.len()]);
        }
        for (name, v) in exposure.iter_mut() {
            let ind: Indicator = name.parse().expect("known indicator");
            for c in self.log.iter().filter(|c| c.indicator == ind) {
                v[self.index[&c.left_id]] += 1;
                v[self.index[&c.right_id]] += 1;
            }
        }
        let progress = self
            .participants
            .keys()
            .filter_map(|k| self.progress(k).map(|p| (k.clone(), p)))
            .collect();
        let answered = self
            .participants
            .iter()
            .map(|(k, p)| {
                let mut v: Vec<(String, usize, usize)> =
                    p.answered.iter().map(|(i, a, b)| (i.name().to_string(), *a, *b)).collect();
                v.sort();
                (k.clone(), v)
            })
            .collect();
        StateDigest {
            exposure,
            progress,
            answered,
            log_len: self.log.len(),
        }
    }
}
