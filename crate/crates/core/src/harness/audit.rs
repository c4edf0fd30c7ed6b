//! Provenance reports and version-to-version diffs.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::crypto::Digest;
use crate::token::{IcToken, PublicId};
use crate::tracker::{Service, Tracker, TrackerError};

/// Field names that differ between two versions of a token, in layout
/// order. The version links and signature are excluded: they change on
/// every commit.
pub fn changed_fields(a: &IcToken, b: &IcToken) -> Vec<&'static str> {
    let (m, n) = (&a.metadata, &b.metadata);
    [
        ("ICID", m.icid != n.icid),
        ("PID", m.pid != n.pid),
        ("EDID", m.edid != n.edid),
        ("markHash", m.mark_hash != n.mark_hash),
        ("stage", m.stage != n.stage),
        ("status", m.status != n.status),
        ("isDefective", m.is_defective != n.is_defective),
        ("keyEncr", a.key.key_encr != b.key.key_encr),
        ("keyHash", a.key.key_hash != b.key.key_hash),
        ("publicID", a.owner != b.owner),
    ]
    .into_iter()
    .filter_map(|(name, changed)| changed.then_some(name))
    .collect()
}

/// Fields a service may change relative to the previous version.
pub fn allowed_fields(service: Service) -> &'static [&'static str] {
    match service {
        Service::EnrollOwner | Service::EnrollIc => &[],
        Service::UpdateStage => &["stage", "status"],
        Service::UpdateComposition => &["PID", "EDID"],
        Service::Transfer => &["keyEncr", "publicID"],
        Service::ReportDefective => &["isDefective"],
    }
}

/// Resolves owner ids to display names, falling back to a short hex id.
pub struct OwnerNames<'a>(pub &'a BTreeMap<PublicId, String>);

impl OwnerNames<'_> {
    pub fn name(&self, id: &PublicId) -> String {
        self.0
            .get(id)
            .cloned()
            .unwrap_or_else(|| format!("owner:{}", id.0.short()))
    }
}

fn ident(d: &Option<Digest>) -> String {
    d.map_or_else(|| "-".to_string(), |d| d.short())
}

/// Latest state and full version history of `icid`, newest first, with
/// what changed at each step and whether each signature still verifies.
/// Rows are numbered from 1; row N holds internal version N-1.
pub fn audit_ic(tracker: &Tracker, icid: &Digest, names: &OwnerNames<'_>) -> Result<String, TrackerError> {
    let history = tracker.trace_history(icid);
    let (_, latest, _) = history.last().ok_or(TrackerError::UnknownIcid)?;
    let mut out = String::new();
    let m = &latest.metadata;
    writeln!(out, "audit {}", icid.to_hex()).unwrap();
    writeln!(
        out,
        "latest: row {} (version {}) stage={} status={} owner={} defective={} pid={} edid={}",
        m.version as usize + 1,
        m.version,
        m.stage.code(),
        m.status.code(),
        names.name(&latest.owner),
        if m.is_defective { "yes" } else { "no" },
        ident(&m.pid),
        ident(&m.edid),
    )
    .unwrap();
    writeln!(out, "history ({} versions, newest first):", history.len()).unwrap();

    let mut verified = 0;
    for (i, (seq, token, service)) in history.iter().enumerate().rev() {
        let signature_ok = tracker.reverify(*seq)?;
        verified += usize::from(signature_ok);
        let changes = match i.checked_sub(1).map(|p| history[p].1) {
            None => format!(
                "enrolled stage={} status={}",
                token.metadata.stage.code(),
                token.metadata.status.code()
            ),
            Some(prev) => describe_changes(prev, token, names),
        };
        writeln!(
            out,
            "  row {:>2} v{:<2} seq={:<4} {:<16} owner={:<14} {} signature={}",
            token.metadata.version as usize + 1,
            token.metadata.version,
            seq,
            service.name(),
            names.name(&token.owner),
            changes,
            if signature_ok { "ok" } else { "FAILED" },
        )
        .unwrap();
    }
    writeln!(out, "signatures: {verified}/{} verified", history.len()).unwrap();
    Ok(out)
}

fn describe_changes(prev: &IcToken, next: &IcToken, names: &OwnerNames<'_>) -> String {
    let (a, b) = (&prev.metadata, &next.metadata);
    let parts: Vec<String> = changed_fields(prev, next)
        .into_iter()
        .map(|field| match field {
            "stage" => format!("stage {}->{}", a.stage.code(), b.stage.code()),
            "status" => format!("status {}->{}", a.status.code(), b.status.code()),
            "PID" => format!("PID {}->{}", ident(&a.pid), ident(&b.pid)),
            "EDID" => format!("EDID {}->{}", ident(&a.edid), ident(&b.edid)),
            "publicID" => format!(
                "owner {}->{}",
                names.name(&prev.owner),
                names.name(&next.owner)
            ),
            "isDefective" => "marked defective".to_string(),
            other => format!("{other} changed"),
        })
        .collect();
    if parts.is_empty() {
        "no field changes".to_string()
    } else {
        parts.join(", ")
    }
}
