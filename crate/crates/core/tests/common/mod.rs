// Check bodies shared by the per-topic test targets and the acceptance run.
#![allow(dead_code)]

pub mod identities;
pub mod invariants;
pub mod oracle;
