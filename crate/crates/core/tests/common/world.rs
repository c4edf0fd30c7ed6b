//! A committed tracker state with ICs parked at every position the
//! service checks care about.

use std::collections::BTreeMap;

use ictoken::crypto::{Digest, PrivateKey, PublicKey};
use ictoken::token::{IcToken, PublicId, Stage, Status};
use ictoken::tracker::Tracker;
use ictoken::wallet::{CompositionTarget, Owner, Wallet};

/// ICs held by owner A unless noted.
pub const FIXTURE_ICS: [&str; 13] = [
    "fab1", "fab2", // Fabrication, Completed
    "pcb1", "pcb2", "pcb3", // PCB Assembly, Completed, unbound
    "busy",    // PCB Assembly, In progress
    "dead",    // PCB Assembly, Completed, reported defective
    "foreign", // PCB Assembly, Completed, held by B
    "bound1", "bound2", "bound3", // on PCBs, System Integration, Completed
    "bound4", "bound5", // on one PCB, still at PCB Assembly
];

pub struct World {
    pub tracker: Tracker,
    pub a: Wallet,
    pub b: Wallet,
    /// Never enrolled.
    pub c: Owner,
    pub ic: BTreeMap<&'static str, Digest>,
}

impl World {
    pub fn build() -> World {
        let mut a = Wallet::new(Owner::create("assembler", Some(9101)));
        let mut b = Wallet::new(Owner::create("integrator", Some(9102)));
        let c = Owner::create("outsider", Some(9103));
        let mut t = Tracker::new();
        t.enroll_owner(a.profile()).unwrap();
        t.enroll_owner(b.profile()).unwrap();

        let mut ic = BTreeMap::new();
        for (i, name) in FIXTURE_ICS.into_iter().enumerate() {
            let token = a
                .build_enrollment(format!("fixture-uid-{name}").as_bytes(), &format!("MK-{name}"), &[i as u8 + 1; 32])
                .unwrap();
            ic.insert(name, token.icid());
            t.enroll_ic(token).unwrap();
        }
        a.sync_assets(&t).unwrap();

        let stage = |a: &mut Wallet, t: &mut Tracker, name: &str, s: Stage, st: Status| {
            let token = a.build_stage_update(&ic[name], s, st).unwrap();
            t.update_stage(token).unwrap();
            a.sync_assets(t).unwrap();
        };
        for name in ["pcb1", "pcb2", "pcb3", "dead", "foreign", "bound1", "bound2", "bound3", "bound4", "bound5"] {
            stage(&mut a, &mut t, name, Stage::PcbAssembly, Status::Completed);
        }
        stage(&mut a, &mut t, "busy", Stage::PcbAssembly, Status::InProgress);
        t.report_defective(a.build_defect_report(&ic["dead"]).unwrap()).unwrap();
        for group in [&["bound1", "bound2"][..], &["bound3"], &["bound4", "bound5"]] {
            let icids: Vec<Digest> = group.iter().map(|n| ic[n]).collect();
            t.update_pid_or_edid(a.build_composition_update(&icids, CompositionTarget::Pcb).unwrap())
                .unwrap();
            a.sync_assets(&t).unwrap();
        }
        for name in ["bound1", "bound2", "bound3"] {
            stage(&mut a, &mut t, name, Stage::SystemIntegration, Status::Completed);
        }
        let to_b = a.build_transfer(&ic["foreign"], &b.profile()).unwrap();
        t.transfer_ic(to_b).unwrap();
        t.flush();
        a.sync_assets(&t).unwrap();
        b.sync_assets(&t).unwrap();
        World { tracker: t, a, b, c, ic }
    }

    pub fn latest(&self, name: &str) -> &IcToken {
        self.tracker.latest(&self.ic[name]).unwrap()
    }

    pub fn owner_ids(&self) -> [PublicId; 3] {
        [self.a.public_id(), self.b.public_id(), self.c.public_id]
    }

    pub fn is_enrolled(&self, id: &PublicId) -> bool {
        *id == self.a.public_id() || *id == self.b.public_id()
    }

    pub fn public_key(&self, id: &PublicId) -> Option<&PublicKey> {
        [&self.a.owner().keys, &self.b.owner().keys, &self.c.keys]
            .into_iter()
            .find(|k| PublicId::of_key(&k.public) == *id)
            .map(|k| &k.public)
    }

    pub fn private_key(&self, id: &PublicId) -> &PrivateKey {
        [&self.a.owner().keys, &self.b.owner().keys, &self.c.keys]
            .into_iter()
            .find(|k| PublicId::of_key(&k.public) == *id)
            .map(|k| &k.private)
            .expect("one of the three fixture owners")
    }
}
