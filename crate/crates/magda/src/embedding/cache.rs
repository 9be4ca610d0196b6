//! Bounded LRU cache in front of an embedding backend. The same finding text
//! recurs across patients, so text embeddings are the hot path.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{EmbeddingBackend, EmbeddingError, EmbeddingVector};

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

struct Lru {
    map: HashMap<String, (EmbeddingVector, u64)>,
    tick: u64,
    capacity: usize,
}

impl Lru {
    fn new(capacity: usize) -> Self {
        Self {
            map: HashMap::new(),
            tick: 0,
            capacity,
        }
    }

    fn get(&mut self, key: &str) -> Option<EmbeddingVector> {
        self.tick += 1;
        let tick = self.tick;
        self.map.get_mut(key).map(|(v, t)| {
            *t = tick;
            v.clone()
        })
    }

    fn put(&mut self, key: String, value: EmbeddingVector) {
        self.tick += 1;
        if self.map.len() >= self.capacity && !self.map.contains_key(&key) {
            if let Some(oldest) = self
                .map
                .iter()
                .min_by_key(|(_, (_, t))| *t)
                .map(|(k, _)| k.clone())
            {
                self.map.remove(&oldest);
            }
        }
        // Last writer wins under concurrent insertion of the same key.
        self.map.insert(key, (value, self.tick));
    }
}

pub struct CachedBackend<B> {
    inner: B,
    cache: Mutex<Lru>,
}

impl<B: EmbeddingBackend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self::with_capacity(inner, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(inner: B, capacity: usize) -> Self {
        Self {
            inner,
            cache: Mutex::new(Lru::new(capacity.max(1))),
        }
    }

    fn cached(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<EmbeddingVector, EmbeddingError>,
    ) -> Result<EmbeddingVector, EmbeddingError> {
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit);
        }
        let value = compute()?;
        self.cache.lock().unwrap().put(key, value.clone());
        Ok(value)
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedBackend<B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.cached(format!("t\u{0}{text}"), || self.inner.embed_text(text))
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.cached(format!("i\u{0}{image_ref}"), || {
            self.inner.embed_image(image_ref)
        })
    }

    fn preflight(&self) -> Result<(), EmbeddingError> {
        self.inner.preflight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
    }

    impl EmbeddingBackend for Counting {
        fn dim(&self) -> usize {
            2
        }
        fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            EmbeddingVector::new(vec![text.len() as f64, 1.0])
        }
        fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, EmbeddingError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            EmbeddingVector::new(vec![image_ref.len() as f64, 2.0])
        }
    }

    #[test]
    fn repeated_lookups_hit_cache() {
        let cached = CachedBackend::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let a = cached.embed_text("abc").unwrap();
        let b = cached.embed_text("abc").unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn text_and_image_keys_do_not_collide() {
        let cached = CachedBackend::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let t = cached.embed_text("x").unwrap();
        let i = cached.embed_image("x").unwrap();
        assert_ne!(t, i);
    }

    #[test]
    fn capacity_bound_evicts_oldest() {
        let cached = CachedBackend::with_capacity(
            Counting {
                calls: AtomicUsize::new(0),
            },
            2,
        );
        cached.embed_text("a").unwrap();
        cached.embed_text("b").unwrap();
        cached.embed_text("a").unwrap(); // refresh a
        cached.embed_text("c").unwrap(); // evicts b
        cached.embed_text("a").unwrap(); // hit
        cached.embed_text("b").unwrap(); // miss again
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 4);
    }
}
