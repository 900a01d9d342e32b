use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use c2crs_core::corpus::{EntityId, TokenId};

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

/// One conversation: utterance history (user and system turns alternate)
/// and the entities mentioned so far, in first-mention order.
#[derive(Debug, Clone)]
pub struct Session {
    pub history: Vec<Vec<TokenId>>,
    pub entities: Vec<EntityId>,
    pub turns: usize,
    pub created: Instant,
    pub last_active: Instant,
}

impl Default for Session {
    fn default() -> Self {
        let now = Instant::now();
        Self {
            history: Vec::new(),
            entities: Vec::new(),
            turns: 0,
            created: now,
            last_active: now,
        }
    }
}

impl Session {
    pub fn mention(&mut self, entities: &[EntityId]) {
        for &e in entities {
            if !self.entities.contains(&e) {
                self.entities.push(e);
            }
        }
    }
}

type Slot = Arc<tokio::sync::Mutex<Session>>;

/// In-memory sessions with idle eviction. Each session sits behind its own
/// async mutex so turns of one session run one at a time.
pub struct SessionStore {
    slots: Mutex<HashMap<String, Slot>>,
    ttl: Duration,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
            ttl,
        }
    }

    pub fn get_or_create(&self, id: &str) -> Slot {
        let mut slots = self.slots.lock().expect("session map poisoned");
        self.evict_locked(&mut slots, Instant::now());
        slots.entry(id.to_string()).or_default().clone()
    }

    pub fn remove(&self, id: &str) -> bool {
        self.slots.lock().expect("session map poisoned").remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn evict(&self, now: Instant) {
        let mut slots = self.slots.lock().expect("session map poisoned");
        self.evict_locked(&mut slots, now);
    }

    fn evict_locked(&self, slots: &mut HashMap<String, Slot>, now: Instant) {
        // sessions with a turn in flight are busy, never idle
        slots.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_active) <= self.ttl,
            Err(_) => true,
        });
    }
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new(DEFAULT_TTL)
    }
}
