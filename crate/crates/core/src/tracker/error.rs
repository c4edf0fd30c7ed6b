use thiserror::Error;

use crate::token::TokenError;

/// Why a tracker service aborted. [`TrackerError::class`] gives the stable
/// name printed by the CLI and matched by scenario expectations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrackerError {
    #[error("AlreadyEnrolled: publicID is already registered")]
    AlreadyEnrolled,
    #[error("ProfileMismatch: publicID is not the hash of the public key")]
    ProfileMismatch,
    #[error("OwnerNotEnrolled: signer is not a registered owner")]
    OwnerNotEnrolled,
    #[error("DuplicateICID: IC is already enrolled")]
    DuplicateIcid,
    #[error("BadSignature: trnsaxnID does not verify under the owner's key")]
    BadSignature,
    #[error("WrongStage: stage not allowed for this service")]
    WrongStage,
    #[error("WrongStatus: enrollment requires status Completed")]
    WrongStatus,
    #[error("NonEmptyComposition: new ICs carry no PID or EDID")]
    NonEmptyComposition,
    #[error("BadVersion: version/prevVer not valid for this service")]
    BadVersion,
    #[error("UnknownICID: IC is not enrolled")]
    UnknownIcid,
    #[error("NotCurrentOwner: token owner is not the IC's current owner")]
    NotCurrentOwner,
    #[error("DefectiveToken: IC has been reported defective")]
    DefectiveToken,
    #[error("IllegalFieldChange: token differs from its previous version outside the fields this service may change")]
    IllegalFieldChange,
    #[error("StageRollback: stage may only move forward")]
    StageRollback,
    #[error("StatusRollback: status may only drop when the stage advances")]
    StatusRollback,
    #[error("MixedOwners: batch tokens belong to different owners")]
    MixedOwners,
    #[error("BatchInvalid: {0}")]
    BatchInvalid(&'static str),
    #[error("MerkleMismatch: identifier is not the merkle root of the batch")]
    MerkleMismatch,
    #[error("CompositionAlreadySet: PCB/device identifier can never be rewritten")]
    CompositionAlreadySet,
    #[error("NewOwnerNotEnrolled: tokens may only move to enrolled owners")]
    NewOwnerNotEnrolled,
    #[error("InProgress: previous version is not Completed")]
    InProgress,
    #[error("KeyTrailBroken: keyHash changed across versions")]
    KeyTrailBroken,
    #[error("BatchTooLarge: batch exceeds the block capacity")]
    BatchTooLarge,
    #[error(transparent)]
    Malformed(#[from] TokenError),
}

impl TrackerError {
    pub fn class(&self) -> &'static str {
        match self {
            TrackerError::AlreadyEnrolled => "AlreadyEnrolled",
            TrackerError::ProfileMismatch => "ProfileMismatch",
            TrackerError::OwnerNotEnrolled => "OwnerNotEnrolled",
            TrackerError::DuplicateIcid => "DuplicateICID",
            TrackerError::BadSignature => "BadSignature",
            TrackerError::WrongStage => "WrongStage",
            TrackerError::WrongStatus => "WrongStatus",
            TrackerError::NonEmptyComposition => "NonEmptyComposition",
            TrackerError::BadVersion => "BadVersion",
            TrackerError::UnknownIcid => "UnknownICID",
            TrackerError::NotCurrentOwner => "NotCurrentOwner",
            TrackerError::DefectiveToken => "DefectiveToken",
            TrackerError::IllegalFieldChange => "IllegalFieldChange",
            TrackerError::StageRollback => "StageRollback",
            TrackerError::StatusRollback => "StatusRollback",
            TrackerError::MixedOwners => "MixedOwners",
            TrackerError::BatchInvalid(_) => "BatchInvalid",
            TrackerError::MerkleMismatch => "MerkleMismatch",
            TrackerError::CompositionAlreadySet => "CompositionAlreadySet",
            TrackerError::NewOwnerNotEnrolled => "NewOwnerNotEnrolled",
            TrackerError::InProgress => "InProgress",
            TrackerError::KeyTrailBroken => "KeyTrailBroken",
            TrackerError::BatchTooLarge => "BatchTooLarge",
            TrackerError::Malformed(_) => "MalformedToken",
        }
    }
}
