//! State behind the annotation service: group assignment, blinded
//! payloads, rating submission and progress. All state except pending
//! assignments is derived from the append-only rating log.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::pipeline::apply_ratings;
use crate::preference::{append_ratings, read_rating_log, CandidateGroup, GroupStatus, RatingRecord, RATING_MAX, RATING_MIN};

/// Opaque per-candidate key; the candidate id and source never leave the store.
pub fn candidate_key(group_id: &str, candidate_id: &str, salt: u64) -> String {
    let digest = Sha256::digest(format!("{group_id}:{candidate_id}:{salt}").as_bytes());
    hex::encode(digest)[..12].to_string()
}

fn order_seed(group_id: &str, rater_id: &str, salt: u64) -> u64 {
    let digest = Sha256::digest(format!("{salt}:{group_id}:{rater_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub key: String,
    /// Reference for `GET /api/playback/{ref}`, or null when not rendered.
    pub playback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPayload {
    pub group_id: String,
    pub context_ref: String,
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedRating {
    pub key: String,
    pub empathy: u8,
    pub appropriateness: u8,
    pub engagement: u8,
    pub naturalness: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub rater: String,
    pub ratings: Vec<SubmittedRating>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("invalid submission: {message}")]
    Invalid { message: String, missing: Vec<String> },
    #[error("rater {rater} already rated group {group}")]
    Duplicate { rater: String, group: String },
    #[error("group {group} is not assigned to rater {rater}")]
    NotAssigned { rater: String, group: String },
    #[error("{0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub open: usize,
    pub rated: usize,
    pub paired: usize,
    /// Groups completed per rater.
    pub raters: BTreeMap<String, usize>,
    pub min_raters: usize,
    pub ready: bool,
}

pub struct AnnotationStore {
    groups: Vec<CandidateGroup>,
    log_path: PathBuf,
    playback_dir: Option<PathBuf>,
    salt: u64,
    min_raters: usize,
    /// rater → group currently assigned and not yet submitted.
    assigned: BTreeMap<String, String>,
    /// (group, rater) pairs that have submitted.
    done: BTreeSet<(String, String)>,
}

impl AnnotationStore {
    /// Open over `groups`, replaying any existing log.
    pub fn open(mut groups: Vec<CandidateGroup>, log_path: impl Into<PathBuf>, salt: u64, min_raters: usize) -> Result<Self> {
        let log_path = log_path.into();
        groups.sort_by(|a, b| a.group_id.cmp(&b.group_id));
        let log = read_rating_log(&log_path)?;
        apply_ratings(&mut groups, &log, min_raters)?;
        let done = log.iter().map(|r| (r.group_id.clone(), r.rater_id.clone())).collect();
        Ok(Self {
            groups,
            log_path,
            playback_dir: None,
            salt,
            min_raters,
            assigned: BTreeMap::new(),
            done,
        })
    }

    pub fn with_playback_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.playback_dir = Some(dir.into());
        self
    }

    pub fn groups(&self) -> &[CandidateGroup] {
        &self.groups
    }

    /// Mark groups that already produced a preference pair.
    pub fn mark_paired<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) {
        let ids: BTreeSet<&str> = ids.into_iter().collect();
        for g in &mut self.groups {
            if ids.contains(g.group_id.as_str()) {
                g.status = GroupStatus::Paired;
            }
        }
    }

    fn group_index(&self, group_id: &str) -> Option<usize> {
        self.groups.binary_search_by(|g| g.group_id.as_str().cmp(group_id)).ok()
    }

    fn payload(&self, g: &CandidateGroup, rater: &str) -> GroupPayload {
        let mut candidates: Vec<CandidateView> = g
            .valid_candidates()
            .map(|c| {
                let key = candidate_key(&g.group_id, &c.candidate_id, self.salt);
                CandidateView {
                    playback: c.playback_ref.as_ref().map(|_| key.clone()),
                    key,
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(order_seed(&g.group_id, rater, self.salt));
        candidates.shuffle(&mut rng);
        GroupPayload {
            group_id: g.group_id.clone(),
            context_ref: g.context_ref.clone(),
            candidates,
        }
    }

    /// Next group for `rater`; repeated calls before submitting return the same group.
    pub fn next_for(&mut self, rater: &str) -> Option<GroupPayload> {
        if let Some(gid) = self.assigned.get(rater) {
            let g = &self.groups[self.group_index(gid).expect("assigned group exists")];
            return Some(self.payload(g, rater));
        }
        let g = self
            .groups
            .iter()
            .find(|g| g.status == GroupStatus::Open && g.is_usable() && !self.done.contains(&(g.group_id.clone(), rater.to_string())))?;
        self.assigned.insert(rater.to_string(), g.group_id.clone());
        Some(self.payload(g, rater))
    }

    /// Validate and append one rater's ratings for a whole group.
    pub fn submit(&mut self, group_id: &str, sub: &Submission, timestamp: u64) -> std::result::Result<usize, SubmitError> {
        let gi = self.group_index(group_id).ok_or_else(|| SubmitError::UnknownGroup(group_id.into()))?;
        let key = (group_id.to_string(), sub.rater.clone());
        if self.done.contains(&key) {
            return Err(SubmitError::Duplicate {
                rater: sub.rater.clone(),
                group: group_id.into(),
            });
        }
        if self.assigned.get(&sub.rater).map(String::as_str) != Some(group_id) {
            return Err(SubmitError::NotAssigned {
                rater: sub.rater.clone(),
                group: group_id.into(),
            });
        }
        let g = &self.groups[gi];
        let by_key: BTreeMap<String, &str> = g
            .valid_candidates()
            .map(|c| (candidate_key(group_id, &c.candidate_id, self.salt), c.candidate_id.as_str()))
            .collect();
        let mut seen = BTreeSet::new();
        let mut records = Vec::with_capacity(sub.ratings.len());
        for r in &sub.ratings {
            let cid = by_key.get(&r.key).ok_or_else(|| SubmitError::Invalid {
                message: format!("unknown candidate key {}", r.key),
                missing: Vec::new(),
            })?;
            if !seen.insert(r.key.as_str()) {
                return Err(SubmitError::Invalid {
                    message: format!("candidate {} rated twice", r.key),
                    missing: Vec::new(),
                });
            }
            for (name, v) in [
                ("empathy", r.empathy),
                ("appropriateness", r.appropriateness),
                ("engagement", r.engagement),
                ("naturalness", r.naturalness),
            ] {
                if !(RATING_MIN..=RATING_MAX).contains(&v) {
                    return Err(SubmitError::Invalid {
                        message: format!("{name} for {} is {v}, expected {RATING_MIN}..={RATING_MAX}", r.key),
                        missing: Vec::new(),
                    });
                }
            }
            records.push(RatingRecord {
                group_id: group_id.into(),
                candidate_id: (*cid).into(),
                rater_id: sub.rater.clone(),
                empathy: r.empathy,
                appropriateness: r.appropriateness,
                engagement: r.engagement,
                naturalness: r.naturalness,
                timestamp,
            });
        }
        let missing: Vec<String> = by_key.keys().filter(|k| !seen.contains(k.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(SubmitError::Invalid {
                message: format!("{} candidate(s) not rated", missing.len()),
                missing,
            });
        }
        append_ratings(&self.log_path, &records).map_err(|e| SubmitError::Storage(e.to_string()))?;
        for r in &records {
            self.groups[gi].add_rating(r.clone());
        }
        self.done.insert(key);
        self.assigned.remove(&sub.rater);
        self.refresh_status(gi);
        Ok(records.len())
    }

    fn refresh_status(&mut self, gi: usize) {
        let g = &mut self.groups[gi];
        if g.status == GroupStatus::Paired {
            return;
        }
        let raters = self
            .done
            .iter()
            .filter(|(gid, _)| *gid == g.group_id)
            .count();
        if raters >= self.min_raters {
            g.status = GroupStatus::Rated;
        }
    }

    pub fn progress(&self) -> Progress {
        let count = |s: GroupStatus| self.groups.iter().filter(|g| g.status == s).count();
        let mut raters = BTreeMap::new();
        for (_, rater) in &self.done {
            *raters.entry(rater.clone()).or_insert(0) += 1;
        }
        let open = count(GroupStatus::Open);
        Progress {
            total: self.groups.len(),
            open,
            rated: count(GroupStatus::Rated),
            paired: count(GroupStatus::Paired),
            raters,
            min_raters: self.min_raters,
            ready: !self.groups.is_empty() && open == 0,
        }
    }

    /// Playback file behind an opaque key.
    pub fn playback_path(&self, key: &str) -> Option<PathBuf> {
        let dir = self.playback_dir.as_ref()?;
        self.groups.iter().find_map(|g| {
            g.valid_candidates()
                .find(|c| candidate_key(&g.group_id, &c.candidate_id, self.salt) == key)
                .and_then(|c| c.playback_ref.as_ref())
                .map(|r| dir.join(r))
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ActionTokenSeq;
    use crate::preference::{Candidate, CandidateSource, GT_CANDIDATE_ID};

    fn group(id: &str) -> CandidateGroup {
        let candidates = ["c1", "c2", "c3", "c4", GT_CANDIDATE_ID]
            .iter()
            .enumerate()
            .map(|(i, cid)| Candidate {
                candidate_id: cid.to_string(),
                tokens: ActionTokenSeq::new(1, 1, vec![i as u16]).unwrap(),
                source: if *cid == GT_CANDIDATE_ID { CandidateSource::GroundTruth } else { CandidateSource::Sampled },
                playback_ref: Some(format!("{id}_{cid}.fpm")),
                valid: true,
            })
            .collect();
        CandidateGroup {
            group_id: id.into(),
            context_ref: format!("clip-{id}"),
            candidates,
            ratings: BTreeMap::new(),
            status: GroupStatus::Open,
        }
    }

    fn store(dir: &Path, n: usize) -> AnnotationStore {
        let groups = (0..n).rev().map(|i| group(&format!("g{i}"))).collect();
        AnnotationStore::open(groups, dir.join("ratings.jsonl"), 5, 1).unwrap()
    }

    fn full(p: &GroupPayload, rater: &str, v: u8) -> Submission {
        Submission {
            rater: rater.into(),
            ratings: p
                .candidates
                .iter()
                .map(|c| SubmittedRating {
                    key: c.key.clone(),
                    empathy: v,
                    appropriateness: v,
                    engagement: v,
                    naturalness: v,
                })
                .collect(),
        }
    }

    #[test]
    fn lowest_id_first_and_assignment_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 3);
        let a = s.next_for("r1").unwrap();
        assert_eq!(a.group_id, "g0");
        assert_eq!(s.next_for("r1").unwrap(), a);
    }

    #[test]
    fn order_is_blinded_per_rater() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 1);
        let a = s.next_for("alice").unwrap();
        let differs = (0..20).any(|i| {
            let b = s.next_for(&format!("bob{i}")).unwrap();
            b.candidates != a.candidates
        });
        assert!(differs);
        let json = serde_json::to_string(&a).unwrap();
        assert!(!json.contains("source") && !json.contains("ground") && !json.contains("\"gt\""));
    }

    #[test]
    fn submission_appends_one_record_per_candidate() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 2);
        let p = s.next_for("r1").unwrap();
        assert_eq!(s.submit("g0", &full(&p, "r1", 4), 10).unwrap(), 5);
        assert_eq!(read_rating_log(s.log_path()).unwrap().len(), 5);
        assert_eq!(s.next_for("r1").unwrap().group_id, "g1");
        let pr = s.progress();
        assert_eq!((pr.open, pr.rated, pr.paired), (1, 1, 0));
        assert!(!pr.ready);
    }

    #[test]
    fn invalid_and_duplicate_submissions_leave_log_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 2);
        let p = s.next_for("r1").unwrap();
        let mut bad = full(&p, "r1", 3);
        bad.ratings[0].engagement = 6;
        assert!(matches!(s.submit("g0", &bad, 0), Err(SubmitError::Invalid { .. })));
        let mut partial = full(&p, "r1", 3);
        let dropped = partial.ratings.pop().unwrap().key;
        match s.submit("g0", &partial, 0) {
            Err(SubmitError::Invalid { missing, .. }) => assert_eq!(missing, vec![dropped]),
            other => panic!("{other:?}"),
        }
        assert!(!s.log_path().exists());
        s.submit("g0", &full(&p, "r1", 3), 0).unwrap();
        let before = std::fs::read(s.log_path()).unwrap();
        assert!(matches!(s.submit("g0", &full(&p, "r1", 3), 0), Err(SubmitError::Duplicate { .. })));
        assert_eq!(std::fs::read(s.log_path()).unwrap(), before);
        assert!(matches!(s.submit("nope", &full(&p, "r1", 3), 0), Err(SubmitError::UnknownGroup(_))));
    }

    #[test]
    fn unassigned_submission_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 2);
        let p = s.next_for("r1").unwrap();
        assert!(matches!(s.submit("g0", &full(&p, "r2", 3), 0), Err(SubmitError::NotAssigned { .. })));
    }

    #[test]
    fn empty_pool() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 0);
        assert!(s.next_for("r").is_none());
        let p = s.progress();
        assert_eq!((p.total, p.open, p.rated, p.paired, p.raters.len()), (0, 0, 0, 0, 0));
        assert!(!p.ready);
    }

    #[test]
    fn replay_reconstructs_statuses_and_progress() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 3);
        for rater in ["a", "b"] {
            let p = s.next_for(rater).unwrap();
            s.submit(&p.group_id, &full(&p, rater, 2), 1).unwrap();
        }
        let replayed = store(dir.path(), 3);
        let statuses = |s: &AnnotationStore| s.groups().iter().map(|g| g.status).collect::<Vec<_>>();
        assert_eq!(statuses(&replayed), statuses(&s));
        assert_eq!(replayed.progress(), s.progress());
        assert_eq!(replayed.progress().raters.values().sum::<usize>(), 2);
    }

    #[test]
    fn ready_after_one_full_pass() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 3);
        while let Some(p) = s.next_for("r") {
            s.submit(&p.group_id, &full(&p, "r", 5), 0).unwrap();
        }
        let p = s.progress();
        assert!(p.ready);
        assert_eq!(p.rated, 3);
        assert_eq!(p.raters["r"], 3);
    }

    #[test]
    fn playback_keys_resolve_to_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = store(dir.path(), 1).with_playback_dir(dir.path());
        let p = s.next_for("r").unwrap();
        let paths: BTreeSet<PathBuf> = p
            .candidates
            .iter()
            .map(|c| s.playback_path(c.playback.as_ref().unwrap()).unwrap())
            .collect();
        assert_eq!(paths.len(), 5);
        assert!(paths.contains(&dir.path().join("g0_gt.fpm")));
        assert!(s.playback_path("000000000000").is_none());
    }
}
