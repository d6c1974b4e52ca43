use std::collections::BTreeMap;

/// Multiply-accumulate and elementwise counts for one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub macs: u64,
    pub elementwise: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.elementwise += rhs.elementwise;
    }
}

/// Per-block operation counters. Counts only grow while enabled; the
/// active block label decides which bucket an operator lands in.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    enabled: bool,
    scope: String,
    blocks: BTreeMap<String, OpCounts>,
}

impl FlopCounter {
    pub fn new(enabled: bool) -> Self {
        FlopCounter { enabled, scope: String::from("other"), blocks: BTreeMap::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    /// Switches the active block label, returning the previous one.
    pub fn set_scope(&mut self, scope: &str) -> String {
        std::mem::replace(&mut self.scope, scope.to_string())
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn add_macs(&mut self, n: u64) {
        if self.enabled {
            self.blocks.entry(self.scope.clone()).or_default().macs += n;
        }
    }

    pub fn add_elementwise(&mut self, n: u64) {
        if self.enabled {
            self.blocks.entry(self.scope.clone()).or_default().elementwise += n;
        }
    }

    pub fn reset(&mut self) {
        self.blocks.clear();
    }

    pub fn total(&self) -> OpCounts {
        let mut t = OpCounts::default();
        for c in self.blocks.values() {
            t += *c;
        }
        t
    }

    pub fn blocks(&self) -> &BTreeMap<String, OpCounts> {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> OpCounts {
        self.blocks.get(name).copied().unwrap_or_default()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.blocks {
            *self.blocks.entry(k.clone()).or_default() += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_counter_ignores_ops() {
        let mut c = FlopCounter::new(false);
        c.add_macs(10);
        assert_eq!(c.total(), OpCounts::default());
    }

    #[test]
    fn scopes_bucket_and_reset_clears() {
        let mut c = FlopCounter::new(true);
        c.set_scope("a");
        c.add_macs(3);
        c.set_scope("b");
        c.add_macs(4);
        c.add_elementwise(2);
        assert_eq!(c.block("a").macs, 3);
        assert_eq!(c.total(), OpCounts { macs: 7, elementwise: 2 });
        c.reset();
        assert_eq!(c.total().macs, 0);
    }
}
