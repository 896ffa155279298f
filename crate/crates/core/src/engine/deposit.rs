use std::collections::VecDeque;

/// A generated token waiting for its scheduled release.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingToken {
    pub seq: u64,
    pub generated_us: u64,
    pub release_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u64,
    pub generated_us: u64,
    pub delivered_us: u64,
    /// Delivered in the finish-time burst rather than on schedule.
    pub flushed: bool,
}

/// Per-request buffer that paces delivery at one token per TBT target.
///
/// Token `k` is released at `max(generated_k, release_{k-1} + tbt)`. With
/// pacing off every token is released as soon as it is generated.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDeposit {
    tbt_us: u64,
    pacing: bool,
    queue: VecDeque<PendingToken>,
    last_release_us: Option<u64>,
    next_seq: u64,
}

impl TokenDeposit {
    pub fn new(tbt_us: u64, pacing: bool) -> Self {
        Self {
            tbt_us,
            pacing,
            queue: VecDeque::new(),
            last_release_us: None,
            next_seq: 0,
        }
    }

    pub fn deposit_token(&mut self, generated_us: u64) -> PendingToken {
        let release_us = match self.last_release_us {
            Some(prev) if self.pacing => generated_us.max(prev + self.tbt_us),
            _ => generated_us,
        };
        let tok = PendingToken {
            seq: self.next_seq,
            generated_us,
            release_us,
        };
        self.next_seq += 1;
        self.last_release_us = Some(release_us);
        self.queue.push_back(tok);
        tok
    }

    /// Releases token `seq` if it is still queued (it may have been flushed).
    pub fn release(&mut self, seq: u64, now_us: u64) -> Option<Delivery> {
        let front = self.queue.front()?;
        if front.seq != seq {
            return None;
        }
        debug_assert_eq!(front.release_us, now_us);
        let t = self.queue.pop_front()?;
        Some(Delivery {
            seq: t.seq,
            generated_us: t.generated_us,
            delivered_us: now_us,
            flushed: false,
        })
    }

    /// Delivers every token still held, ignoring the schedule.
    pub fn flush(&mut self, now_us: u64) -> Vec<Delivery> {
        let out: Vec<Delivery> = self
            .queue
            .drain(..)
            .map(|t| Delivery {
                seq: t.seq,
                generated_us: t.generated_us,
                delivered_us: now_us,
                flushed: t.release_us > now_us,
            })
            .collect();
        self.last_release_us = out.last().map(|d| d.delivered_us).or(self.last_release_us);
        out
    }

    /// Tokens generated but not yet released at `now_us`.
    pub fn balance_at(&self, now_us: u64) -> u64 {
        self.queue.iter().filter(|t| t.release_us > now_us).count() as u64
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_token_goes_out_immediately() {
        let mut d = TokenDeposit::new(50_000, true);
        assert_eq!(d.deposit_token(1_000).release_us, 1_000);
    }

    #[test]
    fn queued_tokens_are_paced() {
        let mut d = TokenDeposit::new(50_000, true);
        d.deposit_token(0);
        assert_eq!(d.deposit_token(10_000).release_us, 50_000);
        assert_eq!(d.deposit_token(20_000).release_us, 100_000);
        // Late token after the deposit ran dry goes out on generation.
        assert_eq!(d.deposit_token(400_000).release_us, 400_000);
    }

    #[test]
    fn ten_token_deposit_covers_half_a_second() {
        let mut d = TokenDeposit::new(50_000, true);
        let last = (0..11).map(|_| d.deposit_token(0)).last().unwrap();
        assert_eq!(last.release_us, 500_000);
    }

    #[test]
    fn flush_delivers_everything_at_finish() {
        let mut d = TokenDeposit::new(50_000, true);
        for _ in 0..6 {
            d.deposit_token(0);
        }
        assert!(d.release(0, 0).is_some());
        let burst = d.flush(10);
        assert_eq!(burst.len(), 5);
        assert!(burst.iter().all(|x| x.delivered_us == 10 && x.flushed));
        assert!(d.release(1, 50_000).is_none());
        assert!(d.flush(20).is_empty());
    }

    #[test]
    fn no_pacing_without_deposit() {
        let mut d = TokenDeposit::new(50_000, false);
        d.deposit_token(0);
        assert_eq!(d.deposit_token(1).release_us, 1);
    }
}
