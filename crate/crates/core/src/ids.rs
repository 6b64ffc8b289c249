//! Identifiers and time sources.
//!
//! Every entity is addressed by a random 128-bit identifier rendered as 32
//! lowercase hex characters. Both the id source and the clock are injectable
//! so a whole engine can be made deterministic under test.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Timestamp = DateTime<Utc>;

// Ids are immutable and cloned a lot, so they share one allocation.
macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(raw: impl Into<String>) -> Self {
                Self(raw.into().into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.into())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s.into())
            }
        }
    };
}

id_newtype!(DialogueId);
id_newtype!(
    /// Globally unique turn identifier; stable across edits.
    TurnId
);
id_newtype!(MemoryId);
id_newtype!(FindingId);
id_newtype!(RunId);
id_newtype!(BatchId);
id_newtype!(EventId);

/// Produces fresh 128-bit identifiers.
pub trait IdSource: Send + Sync {
    fn next_raw(&self) -> u128;

    fn next_hex(&self) -> String {
        format!("{:032x}", self.next_raw())
    }
}

/// Operating-system backed randomness.
#[derive(Debug, Default)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_raw(&self) -> u128 {
        rand::rng().random()
    }
}

/// Seeded ChaCha stream; same seed, same id sequence.
#[derive(Debug)]
pub struct SeededIds(Mutex<ChaCha8Rng>);

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        Self(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))
    }
}

impl IdSource for SeededIds {
    fn next_raw(&self) -> u128 {
        self.0.lock().expect("id rng poisoned").random()
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// A clock that advances by a fixed step on every read.
#[derive(Debug)]
pub struct SteppingClock {
    next_millis: AtomicI64,
    step_millis: i64,
}

impl SteppingClock {
    pub fn new(start: Timestamp, step_millis: i64) -> Self {
        Self {
            next_millis: AtomicI64::new(start.timestamp_millis()),
            step_millis,
        }
    }

    /// 2024-01-01T00:00:00Z, one second per tick.
    pub fn fixed() -> Self {
        Self::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(), 1000)
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> Timestamp {
        let ms = self.next_millis.fetch_add(self.step_millis, Ordering::SeqCst);
        Utc.timestamp_millis_opt(ms).single().expect("clock out of range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn random_ids_do_not_collide() {
        let ids = RandomIds;
        let mut seen = HashSet::with_capacity(100_000);
        for _ in 0..100_000 {
            let id = ids.next_hex();
            assert_eq!(id.len(), 32);
            assert!(id.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
            assert!(seen.insert(id));
        }
    }

    #[test]
    fn seeded_ids_are_reproducible() {
        let a: Vec<_> = (0..5).map({
            let s = SeededIds::new(7);
            move |_| s.next_hex()
        }).collect();
        let b: Vec<_> = (0..5).map({
            let s = SeededIds::new(7);
            move |_| s.next_hex()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn stepping_clock_advances() {
        let c = SteppingClock::fixed();
        let t0 = c.now();
        let t1 = c.now();
        assert_eq!((t1 - t0).num_milliseconds(), 1000);
    }
}
