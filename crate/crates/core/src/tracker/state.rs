//! The four node mappings and the service checks that guard them.
//!
//! `validate` is pure: it either returns the transaction as it will be
//! stored (tracker-assigned version and previous-version link) or the first
//! violated check. `apply` then folds a validated transaction into the
//! mappings. Everything here is a function of the committed chain.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::Digest;
use crate::token::{compute_edid, compute_pid, IcToken, PublicId, SeqIndex, Stage, Status};
use crate::wallet::PublicProfile;

use super::{Transaction, TrackerError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnerEntry {
    pub is_enrolled: bool,
    pub profile: PublicProfile,
    pub assets: BTreeSet<Digest>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeState {
    /// ICID → sequence index of its latest version.
    pub icdb: BTreeMap<Digest, SeqIndex>,
    /// PID → ICIDs on that PCB.
    pub pcbdb: BTreeMap<Digest, Vec<Digest>>,
    /// EDID → PIDs in that device.
    pub devdb: BTreeMap<Digest, Vec<Digest>>,
    pub owndb: BTreeMap<PublicId, OwnerEntry>,
    latest: BTreeMap<Digest, IcToken>,
    committed: u64,
}

impl NodeState {
    pub fn latest(&self, icid: &Digest) -> Option<&IcToken> {
        self.latest.get(icid)
    }

    pub fn latest_tokens(&self) -> impl Iterator<Item = &IcToken> {
        self.latest.values()
    }

    /// Number of tokens committed so far; the next token gets this plus one.
    pub fn committed_tokens(&self) -> u64 {
        self.committed
    }

    pub fn enrolled(&self, owner: &PublicId) -> Option<&OwnerEntry> {
        self.owndb.get(owner).filter(|e| e.is_enrolled)
    }

    /// Checks `token`'s trnsaxnID against `owner`'s registered key.
    pub fn verify_transaxn(&self, owner: &PublicId, token: &IcToken) -> Result<bool, TrackerError> {
        let entry = self.enrolled(owner).ok_or(TrackerError::OwnerNotEnrolled)?;
        let payload = token.signing_payload()?;
        Ok(entry.profile.verify_sign(&payload, &token.trnsaxn_id))
    }

    fn require_signed_by(&self, owner: &PublicId, token: &IcToken) -> Result<(), TrackerError> {
        if self.verify_transaxn(owner, token)? {
            Ok(())
        } else {
            Err(TrackerError::BadSignature)
        }
    }

    fn prior(&self, icid: &Digest) -> Result<(&IcToken, SeqIndex), TrackerError> {
        match (self.latest.get(icid), self.icdb.get(icid)) {
            (Some(token), Some(&seq)) => Ok((token, seq)),
            _ => Err(TrackerError::UnknownIcid),
        }
    }

    fn live_prior(&self, icid: &Digest) -> Result<(&IcToken, SeqIndex), TrackerError> {
        let (prev, seq) = self.prior(icid)?;
        if prev.metadata.is_defective {
            return Err(TrackerError::DefectiveToken);
        }
        Ok((prev, seq))
    }

    /// Validates `tx` against the current state and returns its stored form.
    pub fn validate(&self, tx: &Transaction) -> Result<Transaction, TrackerError> {
        Ok(match tx {
            Transaction::EnrollOwner(profile) => {
                self.check_owner(profile)?;
                tx.clone()
            }
            Transaction::EnrollIc(t) => Transaction::EnrollIc(self.check_enroll_ic(t)?),
            Transaction::UpdateStage(t) => Transaction::UpdateStage(self.check_update_stage(t)?),
            Transaction::UpdateComposition(ts) => {
                Transaction::UpdateComposition(self.check_composition(ts)?)
            }
            Transaction::Transfer(t) => Transaction::Transfer(self.check_transfer(t)?),
            Transaction::ReportDefective(t) => {
                Transaction::ReportDefective(self.check_report_defective(t)?)
            }
        })
    }

    fn check_owner(&self, profile: &PublicProfile) -> Result<(), TrackerError> {
        if self.enrolled(&profile.public_id).is_some() {
            return Err(TrackerError::AlreadyEnrolled);
        }
        if !profile.is_consistent() {
            return Err(TrackerError::ProfileMismatch);
        }
        Ok(())
    }

    fn check_enroll_ic(&self, t: &IcToken) -> Result<IcToken, TrackerError> {
        t.metadata.check()?;
        let m = &t.metadata;
        if self.icdb.contains_key(&m.icid) {
            return Err(TrackerError::DuplicateIcid);
        }
        self.require_signed_by(&t.owner, t)?;
        if m.stage != Stage::Fabrication {
            return Err(TrackerError::WrongStage);
        }
        if m.status != Status::Completed {
            return Err(TrackerError::WrongStatus);
        }
        if m.pid.is_some() || m.edid.is_some() {
            return Err(TrackerError::NonEmptyComposition);
        }
        if m.prev_ver.is_some() || m.version != 0 {
            return Err(TrackerError::BadVersion);
        }
        Ok(t.clone())
    }

    fn check_update_stage(&self, t: &IcToken) -> Result<IcToken, TrackerError> {
        t.metadata.check()?;
        let (prev, prev_seq) = self.live_prior(&t.icid())?;
        self.require_signed_by(&prev.owner, t)?;

        let mut expected = prev.clone();
        expected.metadata.stage = t.metadata.stage;
        expected.metadata.status = t.metadata.status;
        expected.trnsaxn_id = t.trnsaxn_id;
        if expected != *t {
            return Err(TrackerError::IllegalFieldChange);
        }
        if t.metadata.stage < prev.metadata.stage {
            return Err(TrackerError::StageRollback);
        }
        if t.metadata.status < prev.metadata.status && t.metadata.stage <= prev.metadata.stage {
            return Err(TrackerError::StatusRollback);
        }
        successor(t, prev, prev_seq)
    }

    fn check_transfer(&self, t: &IcToken) -> Result<IcToken, TrackerError> {
        t.metadata.check()?;
        let (prev, prev_seq) = self.live_prior(&t.icid())?;
        if self.enrolled(&t.owner).is_none() {
            return Err(TrackerError::NewOwnerNotEnrolled);
        }
        if prev.metadata.status != Status::Completed {
            return Err(TrackerError::InProgress);
        }
        self.require_signed_by(&prev.owner, t)?;

        let mut expected = prev.clone();
        expected.key = t.key.clone();
        expected.owner = t.owner;
        expected.trnsaxn_id = t.trnsaxn_id;
        if expected != *t {
            return Err(TrackerError::IllegalFieldChange);
        }
        if t.key.key_hash != prev.key.key_hash {
            return Err(TrackerError::KeyTrailBroken);
        }
        successor(t, prev, prev_seq)
    }

    fn check_report_defective(&self, t: &IcToken) -> Result<IcToken, TrackerError> {
        t.metadata.check()?;
        let (prev, prev_seq) = self.live_prior(&t.icid())?;
        if t.owner != prev.owner {
            return Err(TrackerError::NotCurrentOwner);
        }
        self.require_signed_by(&prev.owner, t)?;

        let mut expected = prev.clone();
        expected.metadata.is_defective = true;
        expected.trnsaxn_id = t.trnsaxn_id;
        if expected != *t {
            return Err(TrackerError::IllegalFieldChange);
        }
        successor(t, prev, prev_seq)
    }

    fn check_composition(&self, batch: &[IcToken]) -> Result<Vec<IcToken>, TrackerError> {
        if batch.is_empty() {
            return Err(TrackerError::BatchInvalid("empty batch"));
        }
        for t in batch {
            t.metadata.check()?;
        }
        let icids: Vec<Digest> = batch.iter().map(IcToken::icid).collect();
        if icids.iter().collect::<BTreeSet<_>>().len() != icids.len() {
            return Err(TrackerError::BatchInvalid("ICID listed twice"));
        }
        let priors = icids
            .iter()
            .map(|icid| self.live_prior(icid))
            .collect::<Result<Vec<_>, _>>()?;

        let owner = priors[0].0.owner;
        if priors.iter().any(|(prev, _)| prev.owner != owner) {
            return Err(TrackerError::MixedOwners);
        }
        for ((prev, _), t) in priors.iter().zip(batch) {
            self.require_signed_by(&prev.owner, t)?;
        }
        for ((prev, _), t) in priors.iter().zip(batch) {
            let mut expected = (*prev).clone();
            expected.metadata.pid = t.metadata.pid;
            expected.metadata.edid = t.metadata.edid;
            expected.trnsaxn_id = t.trnsaxn_id;
            if expected != *t {
                return Err(TrackerError::IllegalFieldChange);
            }
        }
        if priors.iter().any(|(prev, _)| prev.metadata.status != Status::Completed) {
            return Err(TrackerError::InProgress);
        }

        let first = &batch[0].metadata;
        let pcb_branch = first.pid.is_some()
            && batch.iter().all(|t| t.metadata.edid.is_none() && t.metadata.pid == first.pid);
        let device_branch =
            first.edid.is_some() && batch.iter().all(|t| t.metadata.edid == first.edid);

        if pcb_branch {
            let pid = first.pid.expect("checked above");
            if batch.iter().any(|t| t.metadata.stage != Stage::PcbAssembly) {
                return Err(TrackerError::WrongStage);
            }
            if priors
                .iter()
                .any(|(prev, _)| prev.metadata.pid.is_some() || prev.metadata.edid.is_some())
            {
                return Err(TrackerError::CompositionAlreadySet);
            }
            if compute_pid(&icids).ok() != Some(pid) {
                return Err(TrackerError::MerkleMismatch);
            }
            if self.pcbdb.contains_key(&pid) {
                return Err(TrackerError::CompositionAlreadySet);
            }
        } else if device_branch {
            let edid = first.edid.expect("checked above");
            for ((prev, _), t) in priors.iter().zip(batch) {
                if t.metadata.pid != prev.metadata.pid {
                    return Err(if prev.metadata.pid.is_some() {
                        TrackerError::CompositionAlreadySet
                    } else {
                        TrackerError::BatchInvalid("PID set while binding a device")
                    });
                }
            }
            if batch.iter().any(|t| t.metadata.pid.is_none()) {
                return Err(TrackerError::BatchInvalid("device batch without PCB identifiers"));
            }
            if batch.iter().any(|t| t.metadata.stage != Stage::SystemIntegration) {
                return Err(TrackerError::WrongStage);
            }
            if priors.iter().any(|(prev, _)| prev.metadata.edid.is_some()) {
                return Err(TrackerError::CompositionAlreadySet);
            }
            if compute_edid(&distinct_pids(batch)).ok() != Some(edid) {
                return Err(TrackerError::MerkleMismatch);
            }
            if self.devdb.contains_key(&edid) {
                return Err(TrackerError::CompositionAlreadySet);
            }
        } else {
            return Err(TrackerError::BatchInvalid("tokens share neither a PID nor an EDID"));
        }

        priors
            .iter()
            .zip(batch)
            .map(|((prev, seq), t)| successor(t, prev, *seq))
            .collect()
    }

    /// Folds an already validated, stored-form transaction into the state.
    pub fn apply(&mut self, stored: &Transaction) {
        if let Transaction::EnrollOwner(profile) = stored {
            self.owndb.insert(
                profile.public_id,
                OwnerEntry {
                    is_enrolled: true,
                    profile: profile.clone(),
                    assets: BTreeSet::new(),
                },
            );
            return;
        }

        if let Transaction::UpdateComposition(batch) = stored {
            let icids: Vec<Digest> = batch.iter().map(IcToken::icid).collect();
            let binds_pcb = self
                .latest
                .get(&icids[0])
                .is_some_and(|prev| prev.metadata.pid.is_none());
            if binds_pcb {
                let pid = batch[0].metadata.pid.expect("validated PCB batch");
                let mut members = icids;
                members.sort();
                self.pcbdb.insert(pid, members);
            } else {
                let edid = batch[0].metadata.edid.expect("validated device batch");
                self.devdb.insert(edid, distinct_pids(batch));
            }
        }

        for token in stored.tokens() {
            self.committed += 1;
            let seq = SeqIndex::new(self.committed).expect("committed count starts at one");
            let icid = token.icid();
            let previous_owner = self.latest.get(&icid).map(|prev| prev.owner);
            if previous_owner != Some(token.owner) {
                if let Some(entry) = previous_owner.and_then(|id| self.owndb.get_mut(&id)) {
                    entry.assets.remove(&icid);
                }
                if let Some(entry) = self.owndb.get_mut(&token.owner) {
                    entry.assets.insert(icid);
                }
            }
            self.icdb.insert(icid, seq);
            self.latest.insert(icid, token.clone());
        }
    }

    /// Validates and applies in one step.
    pub fn execute(&mut self, tx: &Transaction) -> Result<Transaction, TrackerError> {
        let stored = self.validate(tx)?;
        self.apply(&stored);
        Ok(stored)
    }

    /// Reconstructs the transaction a wallet signed from its stored form:
    /// wallets sign with the version and link of the version they held, so
    /// those are copied back from the current latest tokens.
    pub fn submitted_form(&self, stored: &Transaction) -> Transaction {
        let mut submitted = stored.clone();
        for token in submitted.tokens_mut() {
            if token.metadata.version == 0 {
                continue;
            }
            if let Some(prev) = self.latest.get(&token.icid()) {
                token.metadata.version = prev.metadata.version;
                token.metadata.prev_ver = prev.metadata.prev_ver;
            }
        }
        submitted
    }
}

fn successor(t: &IcToken, prev: &IcToken, prev_seq: SeqIndex) -> Result<IcToken, TrackerError> {
    let mut stored = t.clone();
    stored.metadata.version = prev
        .metadata
        .version
        .checked_add(1)
        .ok_or(TrackerError::BadVersion)?;
    stored.metadata.prev_ver = Some(prev_seq);
    Ok(stored)
}

fn distinct_pids(batch: &[IcToken]) -> Vec<Digest> {
    batch
        .iter()
        .filter_map(|t| t.metadata.pid)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
