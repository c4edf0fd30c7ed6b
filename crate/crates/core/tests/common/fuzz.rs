//! Mutation fuzzing of the four token services against an assertion-set
//! oracle. Each case starts from a valid submission, mutates fields and
//! signatures at random, and the oracle lists which assertions the result
//! violates. The tracker must accept exactly when that list is empty.

use std::collections::{BTreeMap, BTreeSet};

use ictoken::crypto::{self, change_enc_key, Ciphertext, Digest, Signature};
use ictoken::token::{
    make_icid, make_mark_hash, IcKeyBox, IcMetadata, IcToken, PublicId, SeqIndex, Stage, Status,
};
use ictoken::tracker::{Transaction, TrackerError};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::oracle::{merkle_reference, signing_payload, well_formed};
use super::world::{World, FIXTURE_ICS};

pub const CASES_PER_ALGORITHM: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Algorithm {
    EnrollIc,
    UpdateStage,
    UpdateComposition,
    TransferIc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::EnrollIc,
        Algorithm::UpdateStage,
        Algorithm::UpdateComposition,
        Algorithm::TransferIc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::EnrollIc => "enrollIC",
            Algorithm::UpdateStage => "updateStage",
            Algorithm::UpdateComposition => "updatePIDorEDID",
            Algorithm::TransferIc => "transferIC",
        }
    }

    /// Assertions that can be the only one violated by some mutation.
    /// The rest always fail together with another: an EDID without a PID
    /// is malformed, a nonzero version without a link (or the reverse) is
    /// malformed, and a reused identifier names ICs that are already bound.
    pub fn isolable(self) -> &'static [&'static str] {
        match self {
            Algorithm::EnrollIc => &[
                "icidNew",
                "verifyTransaxn",
                "stageFabrication",
                "statusCompleted",
                "pidNone",
                "wellFormed",
            ],
            Algorithm::UpdateStage => &[
                "enrolled",
                "verifyTransaxn",
                "unchangedOtherThanStageStatus",
                "stageNotBack",
                "statusBackNeedsStageForward",
            ],
            Algorithm::UpdateComposition => &[
                "notDefective",
                "sameOwner",
                "verifyTransaxn",
                "unchangedOtherThanPidEdid",
                "prevCompleted",
                "stagePcbAssembly",
                "pidIsMerkleRoot",
                "edidIsMerkleRoot",
                "sharedIdentifier",
            ],
            Algorithm::TransferIc => &[
                "enrolled",
                "notDefective",
                "newOwnerEnrolled",
                "prevCompleted",
                "verifyTransaxn",
                "unchangedOtherThanKeyOwner",
                "keyHashPreserved",
            ],
        }
    }
}

#[derive(Debug)]
pub struct FuzzStats {
    pub algorithm: Algorithm,
    pub cases: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub counterexamples: Vec<String>,
    /// Cases in which the named assertion was the only one violated.
    pub sole_violations: BTreeMap<&'static str, usize>,
}

impl FuzzStats {
    pub fn uncovered(&self) -> Vec<&'static str> {
        self.algorithm
            .isolable()
            .iter()
            .copied()
            .filter(|a| !self.sole_violations.contains_key(a))
            .collect()
    }
}

const FIELDS: [&str; 12] = [
    "icid", "pid", "edid", "markHash", "stage", "status", "isDefective", "prevVer", "version",
    "keyEncr", "keyHash", "owner",
];

fn differing(a: &IcToken, b: &IcToken) -> BTreeSet<&'static str> {
    let (m, n) = (&a.metadata, &b.metadata);
    let same = [
        m.icid == n.icid,
        m.pid == n.pid,
        m.edid == n.edid,
        m.mark_hash == n.mark_hash,
        m.stage == n.stage,
        m.status == n.status,
        m.is_defective == n.is_defective,
        m.prev_ver == n.prev_ver,
        m.version == n.version,
        a.key.key_encr == b.key.key_encr,
        a.key.key_hash == b.key.key_hash,
        a.owner == b.owner,
    ];
    FIELDS.iter().zip(same).filter(|(_, s)| !s).map(|(f, _)| *f).collect()
}

fn only_changes(prev: &IcToken, next: &IcToken, allowed: &[&str]) -> bool {
    differing(prev, next).iter().all(|f| allowed.contains(f))
}

pub struct Fuzzer<'w> {
    w: &'w World,
    rng: StdRng,
    /// Per-field mutation probability.
    p: f64,
    pids: Vec<Digest>,
}

impl<'w> Fuzzer<'w> {
    pub fn new(w: &'w World, seed: u64) -> Self {
        let pids = w.tracker.state().pcbdb.keys().copied().collect();
        Fuzzer {
            w,
            rng: StdRng::seed_from_u64(seed),
            p: 0.07,
            pids,
        }
    }

    pub fn run(&mut self, algorithm: Algorithm, cases: usize) -> FuzzStats {
        let mut stats = FuzzStats {
            algorithm,
            cases,
            accepted: 0,
            rejected: 0,
            counterexamples: Vec::new(),
            sole_violations: BTreeMap::new(),
        };
        for case in 0..cases {
            let (tx, violated) = match algorithm {
                Algorithm::EnrollIc => self.enroll_case(case),
                Algorithm::UpdateStage => self.stage_case(),
                Algorithm::UpdateComposition => self.composition_case(),
                Algorithm::TransferIc => self.transfer_case(),
            };
            let verdict = self.w.tracker.state().validate(&tx);
            match (&verdict, violated.is_empty()) {
                (Ok(stored), true) => {
                    stats.accepted += 1;
                    if let Some(problem) = self.check_stored(&tx, stored) {
                        stats.counterexamples.push(format!("{} case {case}: {problem}", algorithm.name()));
                    }
                }
                (Err(_), false) => stats.rejected += 1,
                _ => stats.counterexamples.push(format!(
                    "{} case {case}: oracle violations {violated:?}, tracker {:?}",
                    algorithm.name(),
                    verdict.as_ref().err().map(TrackerError::class)
                )),
            }
            if let [only] = violated[..] {
                *stats.sole_violations.entry(only).or_default() += 1;
            }
        }
        stats
    }

    fn hit(&mut self) -> bool {
        self.rng.gen_bool(self.p)
    }

    fn digest(&mut self) -> Digest {
        Digest(self.rng.gen())
    }

    fn pick_icid(&mut self) -> Digest {
        match self.rng.gen_range(0..10) {
            0 => self.digest(),
            1 => Digest::ZERO,
            _ => self.w.ic[FIXTURE_ICS.choose(&mut self.rng).unwrap()],
        }
    }

    fn pick_identifier(&mut self) -> Option<Digest> {
        match self.rng.gen_range(0..6) {
            0 | 1 => None,
            2 => Some(Digest::ZERO),
            3 => Some(*self.pids.choose(&mut self.rng).unwrap()),
            _ => Some(self.digest()),
        }
    }

    fn mutate(&mut self, t: &mut IcToken) {
        if self.hit() {
            t.metadata.icid = self.pick_icid();
        }
        if self.hit() {
            t.metadata.pid = self.pick_identifier();
        }
        if self.hit() {
            t.metadata.edid = self.pick_identifier();
        }
        if self.hit() {
            t.metadata.mark_hash = self.digest();
        }
        if self.hit() {
            t.metadata.stage = *Stage::ALL.choose(&mut self.rng).unwrap();
        }
        if self.hit() {
            t.metadata.status = if self.rng.gen() { Status::Completed } else { Status::InProgress };
        }
        if self.hit() {
            t.metadata.is_defective = !t.metadata.is_defective;
        }
        if self.hit() {
            t.metadata.version = self.rng.gen_range(0..4);
        }
        if self.hit() {
            t.metadata.prev_ver = if self.rng.gen_bool(0.3) {
                None
            } else {
                SeqIndex::new(self.rng.gen_range(1..80))
            };
        }
        if self.hit() {
            self.rng.fill(&mut t.key.key_encr.0[..]);
        }
        if self.hit() {
            t.key.key_hash = self.digest();
        }
        if self.hit() {
            t.owner = *self.w.owner_ids().choose(&mut self.rng).unwrap();
        }
    }

    /// Mostly signs as `rightful`; otherwise signs as someone else, keeps
    /// the stale signature, or writes noise.
    fn sign(&mut self, t: &mut IcToken, rightful: PublicId) {
        let roll: f64 = self.rng.gen();
        let signer = if roll < 0.85 {
            rightful
        } else if roll < 0.93 {
            *self.w.owner_ids().choose(&mut self.rng).unwrap()
        } else if roll < 0.97 {
            return;
        } else {
            let mut noise = Signature::default();
            self.rng.fill(&mut noise.0[..]);
            t.trnsaxn_id = noise;
            return;
        };
        t.trnsaxn_id = crypto::sign(self.w.private_key(&signer), &signing_payload(t));
    }

    fn prev(&self, icid: &Digest) -> Option<&'w IcToken> {
        self.w.tracker.state().latest(icid)
    }

    /// Signer the tracker will hold a submission to: the holder of the
    /// previous version, or the named owner for a new IC.
    fn rightful(&self, t: &IcToken) -> PublicId {
        self.prev(&t.icid()).map_or(t.owner, |p| p.owner)
    }

    fn signed_by(&self, owner: &PublicId, t: &IcToken) -> bool {
        self.w.is_enrolled(owner)
            && self
                .w
                .public_key(owner)
                .is_some_and(|key| crypto::verify(key, &signing_payload(t), &t.trnsaxn_id))
    }

    fn check_stored(&self, tx: &Transaction, stored: &Transaction) -> Option<String> {
        for (sub, st) in tx.tokens().iter().zip(stored.tokens()) {
            let expect = match self.prev(&sub.icid()) {
                None => sub.clone(),
                Some(prev) => {
                    let mut e = sub.clone();
                    e.metadata.version = prev.metadata.version + 1;
                    e.metadata.prev_ver = self.w.tracker.state().icdb.get(&sub.icid()).copied();
                    e
                }
            };
            if *st != expect {
                return Some(format!("stored form differs in {:?}", differing(&expect, st)));
            }
        }
        None
    }

    // enrollIC

    fn enroll_case(&mut self, case: usize) -> (Transaction, Vec<&'static str>) {
        let owner = if self.rng.gen_bool(0.8) { self.w.a.public_id() } else { self.w.b.public_id() };
        let key: [u8; 32] = self.rng.gen();
        let mut encr = Ciphertext::default();
        self.rng.fill(&mut encr.0[..]);
        let mut t = IcToken {
            metadata: IcMetadata::fabricated(
                make_icid(format!("fuzz-uid-{case}").as_bytes()).unwrap(),
                make_mark_hash(&format!("FZ {case}")),
            ),
            key: IcKeyBox {
                key_encr: encr,
                key_hash: crypto::hash(&key),
            },
            owner,
            trnsaxn_id: Signature::default(),
        };
        self.mutate(&mut t);
        let rightful = t.owner;
        self.sign(&mut t, rightful);

        let m = &t.metadata;
        let mut v = Vec::new();
        if !well_formed(&t) {
            v.push("wellFormed");
        }
        if self.prev(&m.icid).is_some() {
            v.push("icidNew");
        }
        if !self.signed_by(&t.owner, &t) {
            v.push("verifyTransaxn");
        }
        if m.stage != Stage::Fabrication {
            v.push("stageFabrication");
        }
        if m.status != Status::Completed {
            v.push("statusCompleted");
        }
        if m.pid.is_some() {
            v.push("pidNone");
        }
        if m.edid.is_some() {
            v.push("edidNone");
        }
        if m.prev_ver.is_some() {
            v.push("prevVerNone");
        }
        if m.version != 0 {
            v.push("versionZero");
        }
        (Transaction::EnrollIc(t), v)
    }

    // updateStage

    fn stage_case(&mut self) -> (Transaction, Vec<&'static str>) {
        let name = *["fab1", "fab2", "pcb1", "pcb2", "bound1", "bound4", "busy"]
            .choose(&mut self.rng)
            .unwrap();
        let prev = self.w.latest(name);
        let mut t = prev.clone();
        let from = prev.metadata.stage as usize - 1;
        t.metadata.stage = *Stage::ALL[from..].choose(&mut self.rng).unwrap();
        t.metadata.status = if self.rng.gen() { Status::Completed } else { Status::InProgress };
        self.mutate(&mut t);
        let rightful = self.rightful(&t);
        self.sign(&mut t, rightful);

        let mut v = Vec::new();
        if !well_formed(&t) {
            v.push("wellFormed");
        }
        let Some(prev) = self.prev(&t.icid()) else {
            v.push("enrolled");
            return (Transaction::UpdateStage(t), v);
        };
        let (m, p) = (&t.metadata, &prev.metadata);
        if p.is_defective {
            v.push("notDefective");
        }
        if !self.signed_by(&prev.owner, &t) {
            v.push("verifyTransaxn");
        }
        if !only_changes(prev, &t, &["stage", "status"]) {
            v.push("unchangedOtherThanStageStatus");
        }
        if m.stage < p.stage {
            v.push("stageNotBack");
        }
        if m.status < p.status && m.stage <= p.stage {
            v.push("statusBackNeedsStageForward");
        }
        (Transaction::UpdateStage(t), v)
    }

    // updatePIDorEDID

    fn composition_case(&mut self) -> (Transaction, Vec<&'static str>) {
        let pcb = self.rng.gen_bool(0.5);
        let pool: &[&str] = if pcb { &["pcb1", "pcb2", "pcb3"] } else { &["bound1", "bound2", "bound3"] };
        let size = self.rng.gen_range(1..=pool.len());
        let names: Vec<&str> = pool.choose_multiple(&mut self.rng, size).copied().collect();
        let mut batch: Vec<IcToken> = names.iter().map(|n| self.w.latest(n).clone()).collect();
        let claim = |batch: &[IcToken]| {
            if pcb {
                merkle_reference(&batch.iter().map(IcToken::icid).collect::<Vec<_>>())
            } else {
                merkle_reference(&batch.iter().filter_map(|t| t.metadata.pid).collect::<Vec<_>>())
            }
        };
        let set = |t: &mut IcToken, id: Option<Digest>| {
            if pcb {
                t.metadata.pid = id;
            } else {
                t.metadata.edid = id;
            }
        };

        let q = self.p * 2.0;
        if self.rng.gen_bool(0.3) {
            let odd_one = ["dead", "busy", "foreign", "fab1", "bound4", "pcb3", "bound3"];
            let extra = self.w.latest(odd_one.choose(&mut self.rng).unwrap()).clone();
            let at = self.rng.gen_range(0..=batch.len());
            batch.insert(at, extra);
        }
        if self.rng.gen_bool(q) && !batch.is_empty() {
            let at = self.rng.gen_range(0..batch.len());
            batch.remove(at);
        }
        if self.rng.gen_bool(q) && !batch.is_empty() {
            let dup = batch.choose(&mut self.rng).unwrap().clone();
            batch.push(dup);
        }
        // The identifier is computed over the (possibly altered) batch
        // unless it is itself mutated.
        let mut identifier = claim(&batch);
        if self.rng.gen_bool(q) {
            identifier = Some(self.digest());
        }
        for t in &mut batch {
            set(t, identifier);
        }
        if self.rng.gen_bool(q) && !batch.is_empty() {
            let other = Some(self.digest());
            set(batch.choose_mut(&mut self.rng).unwrap(), other);
        }
        let p = self.p;
        self.p = p / 2.0;
        for t in &mut batch {
            self.mutate(t);
        }
        self.p = p;
        for t in &mut batch {
            let rightful = self.rightful(t);
            self.sign(t, rightful);
        }

        let v = self.judge_composition(&batch);
        (Transaction::UpdateComposition(batch), v)
    }

    fn judge_composition(&self, batch: &[IcToken]) -> Vec<&'static str> {
        let mut v = Vec::new();
        let Some(first) = batch.first().map(|t| &t.metadata) else {
            return vec!["nonEmpty"];
        };
        if !batch.iter().all(well_formed) {
            v.push("wellFormed");
        }
        let icids: Vec<Digest> = batch.iter().map(IcToken::icid).collect();
        if icids.iter().collect::<BTreeSet<_>>().len() != icids.len() {
            v.push("distinctIcids");
        }
        let Some(priors) = icids.iter().map(|i| self.prev(i)).collect::<Option<Vec<_>>>() else {
            v.push("enrolled");
            return v;
        };
        if priors.iter().any(|p| p.metadata.is_defective) {
            v.push("notDefective");
        }
        if priors.iter().any(|p| p.owner != priors[0].owner) {
            v.push("sameOwner");
        }
        if !priors.iter().zip(batch).all(|(p, t)| self.signed_by(&p.owner, t)) {
            v.push("verifyTransaxn");
        }
        if !priors.iter().zip(batch).all(|(p, t)| only_changes(p, t, &["pid", "edid"])) {
            v.push("unchangedOtherThanPidEdid");
        }
        if priors.iter().any(|p| p.metadata.status != Status::Completed) {
            v.push("prevCompleted");
        }
        let state = self.w.tracker.state();
        let binds_pcb = first.pid.is_some()
            && batch.iter().all(|t| t.metadata.edid.is_none() && t.metadata.pid == first.pid);
        let binds_device = first.edid.is_some() && batch.iter().all(|t| t.metadata.edid == first.edid);
        if binds_pcb {
            let pid = first.pid.unwrap();
            if batch.iter().any(|t| t.metadata.stage != Stage::PcbAssembly) {
                v.push("stagePcbAssembly");
            }
            if priors.iter().any(|p| p.metadata.pid.is_some() || p.metadata.edid.is_some()) {
                v.push("prevUnbound");
            }
            if merkle_reference(&icids) != Some(pid) {
                v.push("pidIsMerkleRoot");
            }
            if state.pcbdb.contains_key(&pid) {
                v.push("pidUnused");
            }
        } else if binds_device {
            let edid = first.edid.unwrap();
            if priors.iter().zip(batch).any(|(p, t)| p.metadata.pid != t.metadata.pid) {
                v.push("pidUnchanged");
            }
            if batch.iter().any(|t| t.metadata.pid.is_none()) {
                v.push("pidPresent");
            }
            if batch.iter().any(|t| t.metadata.stage != Stage::SystemIntegration) {
                v.push("stageSystemIntegration");
            }
            if priors.iter().any(|p| p.metadata.edid.is_some()) {
                v.push("prevNoEdid");
            }
            let pids: Vec<Digest> = batch.iter().filter_map(|t| t.metadata.pid).collect();
            if merkle_reference(&pids) != Some(edid) {
                v.push("edidIsMerkleRoot");
            }
            if state.devdb.contains_key(&edid) {
                v.push("edidUnused");
            }
        } else {
            v.push("sharedIdentifier");
        }
        v
    }

    // transferIC

    fn transfer_case(&mut self) -> (Transaction, Vec<&'static str>) {
        let name = *["fab1", "fab2", "pcb1", "pcb2", "pcb3", "bound1", "bound2", "bound4", "busy", "dead"]
            .choose(&mut self.rng)
            .unwrap();
        let prev = self.w.latest(name);
        let to = self.w.b.profile();
        let mut t = prev.clone();
        t.key.key_encr = change_enc_key(
            self.w.private_key(&prev.owner),
            &to.public_key,
            &mut self.rng,
            &prev.key.key_encr,
        )
        .unwrap();
        t.owner = to.public_id;
        self.mutate(&mut t);
        let rightful = self.rightful(&t);
        self.sign(&mut t, rightful);

        let mut v = Vec::new();
        if !well_formed(&t) {
            v.push("wellFormed");
        }
        let Some(prev) = self.prev(&t.icid()) else {
            v.push("enrolled");
            return (Transaction::Transfer(t), v);
        };
        if prev.metadata.is_defective {
            v.push("notDefective");
        }
        if !self.w.is_enrolled(&t.owner) {
            v.push("newOwnerEnrolled");
        }
        if prev.metadata.status != Status::Completed {
            v.push("prevCompleted");
        }
        if !self.signed_by(&prev.owner, &t) {
            v.push("verifyTransaxn");
        }
        if !only_changes(prev, &t, &["keyEncr", "keyHash", "owner"]) {
            v.push("unchangedOtherThanKeyOwner");
        }
        if t.key.key_hash != prev.key.key_hash {
            v.push("keyHashPreserved");
        }
        (Transaction::Transfer(t), v)
    }
}
