use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{hash, Digest};
use crate::token::{IcToken, TokenError};
use crate::wallet::PublicProfile;

/// A service request as submitted by a wallet, and (with tracker-assigned
/// version links) as stored in a block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Transaction {
    EnrollOwner(PublicProfile),
    EnrollIc(IcToken),
    UpdateStage(IcToken),
    UpdateComposition(Vec<IcToken>),
    Transfer(IcToken),
    ReportDefective(IcToken),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    EnrollOwner,
    EnrollIc,
    UpdateStage,
    UpdateComposition,
    Transfer,
    ReportDefective,
}

impl Service {
    fn tag(self) -> u8 {
        match self {
            Service::EnrollOwner => 0x10,
            Service::EnrollIc => 0x11,
            Service::UpdateStage => 0x12,
            Service::UpdateComposition => 0x13,
            Service::Transfer => 0x14,
            Service::ReportDefective => 0x15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Service::EnrollOwner => "enrollOwner",
            Service::EnrollIc => "enrollIC",
            Service::UpdateStage => "updateStage",
            Service::UpdateComposition => "updatePIDorEDID",
            Service::Transfer => "transferIC",
            Service::ReportDefective => "reportDefective",
        }
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Transaction {
    pub fn service(&self) -> Service {
        match self {
            Transaction::EnrollOwner(_) => Service::EnrollOwner,
            Transaction::EnrollIc(_) => Service::EnrollIc,
            Transaction::UpdateStage(_) => Service::UpdateStage,
            Transaction::UpdateComposition(_) => Service::UpdateComposition,
            Transaction::Transfer(_) => Service::Transfer,
            Transaction::ReportDefective(_) => Service::ReportDefective,
        }
    }

    pub fn tokens(&self) -> &[IcToken] {
        match self {
            Transaction::EnrollOwner(_) => &[],
            Transaction::UpdateComposition(tokens) => tokens,
            Transaction::EnrollIc(t)
            | Transaction::UpdateStage(t)
            | Transaction::Transfer(t)
            | Transaction::ReportDefective(t) => std::slice::from_ref(t),
        }
    }

    pub(crate) fn tokens_mut(&mut self) -> &mut [IcToken] {
        match self {
            Transaction::EnrollOwner(_) => &mut [],
            Transaction::UpdateComposition(tokens) => tokens,
            Transaction::EnrollIc(t)
            | Transaction::UpdateStage(t)
            | Transaction::Transfer(t)
            | Transaction::ReportDefective(t) => std::slice::from_mut(t),
        }
    }

    /// Block slots taken: one per token, one for an owner enrollment.
    pub fn weight(&self) -> usize {
        self.tokens().len().max(1)
    }

    /// Binary image bound into a block's token root: service tag, then the
    /// owner profile or a big-endian token count and canonical tokens.
    pub fn encode(&self) -> Result<Vec<u8>, TokenError> {
        let mut out = vec![self.service().tag()];
        match self {
            Transaction::EnrollOwner(profile) => {
                out.extend_from_slice(&profile.public_id.0 .0);
                out.extend_from_slice(profile.public_key.to_der());
            }
            _ => {
                let tokens = self.tokens();
                let count = u16::try_from(tokens.len())
                    .map_err(|_| TokenError::Malformed("too many tokens in one transaction"))?;
                out.extend_from_slice(&count.to_be_bytes());
                for token in tokens {
                    out.extend_from_slice(&token.encode()?);
                }
            }
        }
        Ok(out)
    }

    /// Submission identifier. Defined over the text form so it exists even
    /// for malformed submissions.
    pub fn id(&self) -> Digest {
        hash(&serde_json::to_vec(self).expect("transactions always serialize"))
    }
}
