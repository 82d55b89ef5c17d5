use serde::{Deserialize, Serialize};

use super::ServerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    CpToServer,
    ServerToCp,
}

/// One metered message. `server` is the data server on the non-coordinator end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub server: ServerId,
    pub direction: Direction,
    pub words: usize,
}

/// Per-round, per-edge tally of communicated words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    servers: usize,
    rounds: usize,
    entries: Vec<LedgerEntry>,
    total_words: usize,
}

/// Aggregated view of a ledger. `words_by_round[r]` is round `r + 1`;
/// `words_by_server[t]` is server `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub rounds: usize,
    pub total_words: usize,
    pub words_by_round: Vec<usize>,
    pub words_by_server: Vec<usize>,
}

impl CommLedger {
    pub fn new(servers: usize) -> Self {
        Self {
            servers,
            rounds: 0,
            entries: Vec::new(),
            total_words: 0,
        }
    }

    pub(crate) fn open_round(&mut self) -> usize {
        self.rounds += 1;
        self.rounds
    }

    pub(crate) fn record(&mut self, server: ServerId, direction: Direction, words: usize) {
        debug_assert!(self.rounds > 0, "record outside a round");
        self.entries.push(LedgerEntry {
            round: self.rounds,
            server,
            direction,
            words,
        });
        self.total_words += words;
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn total_words(&self) -> usize {
        self.total_words
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn words_in(&self, direction: Direction) -> usize {
        self.entries.iter().filter(|e| e.direction == direction).map(|e| e.words).sum()
    }

    /// Bit-level estimate: every word costs `value_bits + ⌈log₂(n·d)⌉` bits.
    pub fn bits_estimate(&self, value_bits: u32, n: usize, d: usize) -> u128 {
        let index_bits = ((n.max(1) as f64) * (d.max(1) as f64)).log2().ceil() as u128;
        self.total_words as u128 * (value_bits as u128 + index_bits)
    }

    pub fn summary(&self) -> LedgerSummary {
        let mut words_by_round = vec![0; self.rounds];
        let mut words_by_server = vec![0; self.servers];
        for e in &self.entries {
            words_by_round[e.round - 1] += e.words;
            if (1..=self.servers).contains(&e.server) {
                words_by_server[e.server - 1] += e.words;
            }
        }
        LedgerSummary {
            rounds: self.rounds,
            total_words: self.total_words,
            words_by_round,
            words_by_server,
        }
    }
}

pub fn ledger_summary(ledger: &CommLedger) -> LedgerSummary {
    ledger.summary()
}
