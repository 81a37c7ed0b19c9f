//! Interactive sessions and the bounded store that holds them.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use mst_core::clicks::{Click, ClickState};
use mst_core::eval::BINARIZE_THRESHOLD;
use mst_core::raster::{Image, Mask, Plane};
use rand::Rng;

use crate::letterbox::Letterbox;

pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

/// Everything needed to restore a session to an earlier click.
#[derive(Debug, Clone)]
struct Snapshot {
    state: ClickState,
    mask: Plane,
    log_len: usize,
}

#[derive(Debug)]
pub struct Session {
    pub letterbox: Letterbox,
    /// The letterboxed image at model resolution.
    pub input: Arc<Image>,
    pub gt: Option<Mask>,
    /// Clicks and previous mask in model coordinates.
    pub state: ClickState,
    /// Soft mask at the original resolution.
    pub mask: Plane,
    /// Clicks as posted, in original image coordinates.
    pub log: Vec<Click>,
    history: Vec<Snapshot>,
}

impl Session {
    pub fn new(image: &Image, gt: Option<Mask>, side: usize) -> Self {
        let letterbox = Letterbox::new(image.width, image.height, side);
        Self {
            input: Arc::new(letterbox.apply(image)),
            letterbox,
            gt,
            state: ClickState::new(side, side),
            mask: Plane::zeros(image.width, image.height),
            log: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.letterbox.width
    }

    pub fn height(&self) -> usize {
        self.letterbox.height
    }

    /// Whether `click` repeats the most recent click exactly.
    pub fn repeats_last(&self, click: &Click) -> bool {
        self.log.last() == Some(click)
    }

    /// The click state to run the model on once `click` (original coordinates) is added.
    pub fn with_click(&self, click: Click) -> mst_core::Result<ClickState> {
        let (x, y) = self.letterbox.to_model(click.x, click.y);
        let mut state = self.state.clone();
        state.push(Click { x, y, ..click })?;
        Ok(state)
    }

    /// Records a completed click: `state` already holds it, `soft` is the model output.
    pub fn commit(&mut self, click: Click, mut state: ClickState, soft: Plane) -> mst_core::Result<()> {
        self.history.push(Snapshot {
            state: self.state.clone(),
            mask: self.mask.clone(),
            log_len: self.log.len(),
        });
        self.mask = self.letterbox.to_original(&soft);
        state.set_mask(soft)?;
        self.state = state;
        self.log.push(click);
        Ok(())
    }

    /// Reverts the last click; `false` when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        match self.history.pop() {
            Some(s) => {
                self.state = s.state;
                self.mask = s.mask;
                self.log.truncate(s.log_len);
                true
            }
            None => false,
        }
    }

    pub fn reset(&mut self) {
        let side = self.state.width;
        self.state = ClickState::new(side, side);
        self.mask = Plane::zeros(self.width(), self.height());
        self.log.clear();
        self.history.clear();
    }

    /// Masks on the undo stack, counting the initial empty one.
    pub fn history_depth(&self) -> usize {
        self.history.len() + 1
    }

    pub fn binary_mask(&self) -> Mask {
        self.mask.threshold(BINARIZE_THRESHOLD)
    }

    pub fn iou(&self) -> Option<f64> {
        self.gt.as_ref().and_then(|gt| self.binary_mask().iou(gt).ok())
    }
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

struct Entry {
    session: SessionHandle,
    last_used: Instant,
}

/// Sessions keyed by id: expired after `ttl` idle, least recently used evicted at capacity.
pub struct SessionStore {
    entries: Mutex<HashMap<String, Entry>>,
    max_sessions: usize,
    ttl: Duration,
}

impl SessionStore {
    pub fn new(max_sessions: usize, ttl: Duration) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            max_sessions: max_sessions.max(1),
            ttl,
        }
    }

    pub fn insert(&self, session: Session) -> String {
        self.insert_at(session, Instant::now())
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.get_at(id, Instant::now())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert_at(&self, session: Session, now: Instant) -> String {
        let mut entries = self.entries.lock().unwrap();
        entries.retain(|_, e| now.saturating_duration_since(e.last_used) < self.ttl);
        while entries.len() >= self.max_sessions {
            let oldest = entries
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(id, _)| id.clone())
                .expect("store is non-empty");
            entries.remove(&oldest);
        }
        let id = loop {
            let id = format!("{:032x}", rand::rng().random::<u128>());
            if !entries.contains_key(&id) {
                break id;
            }
        };
        entries.insert(
            id.clone(),
            Entry {
                session: Arc::new(tokio::sync::Mutex::new(session)),
                last_used: now,
            },
        );
        id
    }

    fn get_at(&self, id: &str, now: Instant) -> Option<SessionHandle> {
        let mut entries = self.entries.lock().unwrap();
        let expired = entries
            .get(id)
            .is_some_and(|e| now.saturating_duration_since(e.last_used) >= self.ttl);
        if expired {
            entries.remove(id);
            return None;
        }
        let entry = entries.get_mut(id)?;
        entry.last_used = now;
        Some(entry.session.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> Session {
        Session::new(&Image::filled(8, 8, [0.5; 3]), None, 8)
    }

    #[test]
    fn least_recently_used_is_evicted() {
        let store = SessionStore::new(2, DEFAULT_TTL);
        let t0 = Instant::now();
        let a = store.insert_at(session(), t0);
        let b = store.insert_at(session(), t0 + Duration::from_secs(1));
        assert!(store.get_at(&a, t0 + Duration::from_secs(2)).is_some());
        let c = store.insert_at(session(), t0 + Duration::from_secs(3));
        assert!(store.get_at(&b, t0 + Duration::from_secs(4)).is_none());
        assert!(store.get_at(&a, t0 + Duration::from_secs(4)).is_some());
        assert!(store.get_at(&c, t0 + Duration::from_secs(4)).is_some());
    }

    #[test]
    fn idle_sessions_expire() {
        let store = SessionStore::new(4, Duration::from_secs(60));
        let t0 = Instant::now();
        let a = store.insert_at(session(), t0);
        assert!(store.get_at(&a, t0 + Duration::from_secs(59)).is_some());
        assert!(store.get_at(&a, t0 + Duration::from_secs(118)).is_some());
        assert!(store.get_at(&a, t0 + Duration::from_secs(178)).is_none());
        assert!(store.is_empty());
    }

    #[test]
    fn undo_restores_the_previous_mask() {
        let mut s = session();
        let click = Click::positive(3, 3);
        let state = s.with_click(click).unwrap();
        s.commit(click, state, Plane { width: 8, height: 8, data: vec![0.9; 64] })
            .unwrap();
        assert!(s.repeats_last(&click));
        assert_eq!(s.binary_mask().area(), 64);
        assert!(s.undo());
        assert_eq!(s.binary_mask().area(), 0);
        assert!(s.log.is_empty() && s.state.is_empty());
        assert!(!s.undo());
    }
}
