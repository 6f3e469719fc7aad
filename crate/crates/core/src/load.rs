//! Capacity arithmetic for a shared inbox.
//!
//! Every client downloads and trial-decrypts every new header, so per-client
//! work scales with total traffic and server egress scales with users squared.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadParams {
    pub users: u64,
    pub messages_per_user_per_day: u64,
    pub header_ct_size: u64,
    pub syncs_per_user_per_day: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadEstimate {
    pub daily_new_header_bytes: u128,
    pub per_client_daily_decrypt_bytes: u128,
    pub server_daily_egress_bytes: u128,
    pub trial_decryptions_per_client_per_day: u128,
    /// Average header download per sync, rounded up.
    pub per_sync_download_bytes: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parameter `{0}` must be strictly positive")]
pub struct NonPositiveParameter(pub &'static str);

impl LoadParams {
    pub fn validate(&self) -> Result<(), NonPositiveParameter> {
        for (name, value) in [
            ("users", self.users),
            ("messages_per_user_per_day", self.messages_per_user_per_day),
            ("header_ct_size", self.header_ct_size),
            ("syncs_per_user_per_day", self.syncs_per_user_per_day),
        ] {
            if value == 0 {
                return Err(NonPositiveParameter(name));
            }
        }
        Ok(())
    }
}

pub fn estimate(params: &LoadParams) -> Result<LoadEstimate, NonPositiveParameter> {
    params.validate()?;
    let users = u128::from(params.users);
    let messages = users * u128::from(params.messages_per_user_per_day);
    let daily_new_header_bytes = messages * u128::from(params.header_ct_size);
    // Sync is incremental: each client pulls each header once, however often it
    // syncs. More syncs only split the same bytes into smaller downloads.
    Ok(LoadEstimate {
        daily_new_header_bytes,
        per_client_daily_decrypt_bytes: daily_new_header_bytes,
        server_daily_egress_bytes: daily_new_header_bytes * users,
        trial_decryptions_per_client_per_day: messages,
        per_sync_download_bytes: daily_new_header_bytes
            .div_ceil(u128::from(params.syncs_per_user_per_day)),
    })
}
