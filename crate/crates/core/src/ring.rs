use std::collections::VecDeque;

/// FIFO with a fixed capacity; pushing onto a full queue evicts the oldest item.
#[derive(Debug, Clone)]
pub struct BoundedQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> BoundedQueue<T> {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be at least 1");
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    /// Appends `item`, returning the evicted oldest item if the queue was full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn pop_front(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn front(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn back(&self) -> Option<&T> {
        self.items.back()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Changes capacity, dropping the oldest items if the queue no longer fits.
    /// Returns the dropped items oldest first.
    pub fn set_capacity(&mut self, capacity: usize) -> Vec<T> {
        assert!(capacity > 0, "capacity must be at least 1");
        self.capacity = capacity;
        let excess = self.items.len().saturating_sub(capacity);
        self.items.drain(..excess).collect()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn iter(&self) -> std::collections::vec_deque::Iter<'_, T> {
        self.items.iter()
    }

    /// Removes items from the front while `pred` holds; returns how many.
    pub fn drain_front_while(&mut self, mut pred: impl FnMut(&T) -> bool) -> usize {
        let mut n = 0;
        while self.items.front().is_some_and(&mut pred) {
            self.items.pop_front();
            n += 1;
        }
        n
    }
}
