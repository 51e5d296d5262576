/// LRU set-associative array. Sets live back to back in one buffer; within a
/// set, index 0 is the most recently used way.
#[derive(Debug, Clone)]
pub struct SetAssoc<V> {
    entries: Vec<(u64, V)>,
    lens: Vec<u8>,
    ways: usize,
    mask: u64,
}

impl<V: Copy + Default> SetAssoc<V> {
    pub fn new(sets: usize, ways: usize) -> Self {
        debug_assert!(sets.is_power_of_two());
        assert!(ways <= u8::MAX as usize, "at most 255 ways");
        SetAssoc {
            entries: vec![(0, V::default()); sets * ways],
            lens: vec![0; sets],
            ways,
            mask: sets as u64 - 1,
        }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    fn index(&self, line: u64) -> usize {
        (line & self.mask) as usize
    }

    fn set(&self, line: u64) -> &[(u64, V)] {
        let i = self.index(line);
        let base = i * self.ways;
        &self.entries[base..base + self.lens[i] as usize]
    }

    fn set_mut(&mut self, line: u64) -> &mut [(u64, V)] {
        let i = self.index(line);
        let base = i * self.ways;
        &mut self.entries[base..base + self.lens[i] as usize]
    }

    pub fn contains(&self, line: u64) -> bool {
        self.set(line).iter().any(|(l, _)| *l == line)
    }

    /// Recency position, 0 being most recent.
    pub fn rank(&self, line: u64) -> Option<usize> {
        self.set(line).iter().position(|(l, _)| *l == line)
    }

    pub fn get(&self, line: u64) -> Option<&V> {
        self.set(line)
            .iter()
            .find(|(l, _)| *l == line)
            .map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, line: u64) -> Option<&mut V> {
        self.set_mut(line)
            .iter_mut()
            .find(|(l, _)| *l == line)
            .map(|(_, v)| v)
    }

    /// Promotes `line` to most recent. Returns false on a miss.
    pub fn touch(&mut self, line: u64) -> bool {
        let set = self.set_mut(line);
        match set.iter().position(|(l, _)| *l == line) {
            Some(pos) => {
                set[..=pos].rotate_right(1);
                true
            }
            None => false,
        }
    }

    /// Inserts a line absent from the set at the most-recent position.
    /// Returns the displaced least-recent entry when the set was full.
    pub fn insert_mru(&mut self, line: u64, value: V) -> Option<(u64, V)> {
        debug_assert!(!self.contains(line));
        let (i, ways) = (self.index(line), self.ways);
        let base = i * ways;
        let len = self.lens[i] as usize;
        let victim = (len == ways).then(|| self.entries[base + ways - 1]);
        let used = len.min(ways - 1);
        let set = &mut self.entries[base..base + used + 1];
        set.rotate_right(1);
        set[0] = (line, value);
        self.lens[i] = (used + 1) as u8;
        victim
    }

    /// Inserts at the least-recent position, evicting the previous LRU way
    /// first if the set is full.
    pub fn insert_lru(&mut self, line: u64, value: V) -> Option<(u64, V)> {
        debug_assert!(!self.contains(line));
        let (i, ways) = (self.index(line), self.ways);
        let base = i * ways;
        let len = self.lens[i] as usize;
        if len == ways {
            let victim = std::mem::replace(&mut self.entries[base + ways - 1], (line, value));
            Some(victim)
        } else {
            self.entries[base + len] = (line, value);
            self.lens[i] += 1;
            None
        }
    }

    pub fn remove(&mut self, line: u64) -> Option<V> {
        let i = self.index(line);
        let set = self.set_mut(line);
        let pos = set.iter().position(|(l, _)| *l == line)?;
        let value = set[pos].1;
        set[pos..].rotate_left(1);
        self.lens[i] -= 1;
        Some(value)
    }

    pub fn occupancy(&self, line: u64) -> usize {
        self.lens[self.index(line)] as usize
    }

    pub fn lines_in_set(&self, line: u64) -> impl Iterator<Item = u64> + '_ {
        self.set(line).iter().map(|(l, _)| *l)
    }

    pub fn clear(&mut self) {
        self.lens.iter_mut().for_each(|l| *l = 0);
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &V)> {
        self.lens.iter().enumerate().flat_map(move |(i, &len)| {
            let base = i * self.ways;
            self.entries[base..base + len as usize]
                .iter()
                .map(|(l, v)| (*l, v))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_victim_and_ranks() {
        let mut c = SetAssoc::new(4, 2);
        assert!(c.insert_mru(0, ()).is_none());
        assert!(c.insert_mru(4, ()).is_none());
        assert_eq!(c.rank(0), Some(1));
        c.touch(0);
        assert_eq!(c.insert_mru(8, ()).map(|v| v.0), Some(4));
        // other sets unaffected
        assert!(c.insert_mru(1, ()).is_none());
        assert_eq!(c.occupancy(0), 2);
    }

    #[test]
    fn lru_insert_goes_last() {
        let mut c = SetAssoc::new(1, 3);
        c.insert_mru(1, ());
        c.insert_mru(2, ());
        c.insert_lru(3, ());
        assert_eq!(c.rank(3), Some(2));
        // full: the old LRU (3) leaves before the new line takes its place
        assert_eq!(c.insert_lru(4, ()).map(|v| v.0), Some(3));
        assert_eq!(c.rank(4), Some(2));
    }
}
