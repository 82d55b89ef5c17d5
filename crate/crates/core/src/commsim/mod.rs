//! Simulated coordinator/servers fabric.
//!
//! A protocol alternates between a coordinator step and a round of server
//! steps. In each round the coordinator (server 0) addresses at most one
//! message to each data server `1..=s`; every addressed server answers with
//! exactly one reply. Servers never talk to each other. Every message is
//! metered in words through [`Payload::words`] and recorded in a
//! [`CommLedger`].
//!
//! Randomness comes from ChaCha8 streams keyed by `(server, round)` under the
//! run's master seed, so sequential and parallel schedules produce the same
//! transcript.

mod ledger;

pub use ledger::{ledger_summary, CommLedger, Direction, LedgerEntry, LedgerSummary};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// `0` is the coordinator; data servers are `1..=s`.
pub type ServerId = usize;

pub const COORDINATOR: ServerId = 0;

/// Anything that crosses the fabric. One word per index or numeric value.
pub trait Payload {
    fn words(&self) -> usize;
}

impl Payload for () {
    fn words(&self) -> usize {
        0
    }
}

impl Payload for f64 {
    fn words(&self) -> usize {
        1
    }
}

impl Payload for Vec<f64> {
    fn words(&self) -> usize {
        self.len()
    }
}

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("a protocol needs at least one server")]
    NoServers,
    #[error("isolation violation: server {server} read data owned by server {owner}")]
    IsolationViolation { server: ServerId, owner: ServerId },
    #[error("protocol exceeded its declared bound of {bound} rounds")]
    RoundBoundExceeded { bound: usize },
    #[error("message addressed to server {to}, but only 1..={servers} exist")]
    Misrouted { to: ServerId, servers: usize },
    #[error("server {to} addressed twice in round {round}")]
    DuplicateRecipient { to: ServerId, round: usize },
    #[error("word tally mismatch on server {server}: sent {sent}, received {received}")]
    ConservationMismatch { server: ServerId, sent: usize, received: usize },
    #[error("server {server} failed: {reason}")]
    StepFailed { server: ServerId, reason: String },
}

impl FabricError {
    pub fn step_failed(server: ServerId, reason: impl ToString) -> Self {
        FabricError::StepFailed {
            server,
            reason: reason.to_string(),
        }
    }
}

/// Data owned by one server. Reads go through [`ServerCtx::read`], which
/// rejects access by any other server.
#[derive(Debug, Clone)]
pub struct Tagged<T> {
    owner: ServerId,
    value: T,
}

impl<T> Tagged<T> {
    pub fn new(owner: ServerId, value: T) -> Self {
        Self { owner, value }
    }

    pub fn owner(&self) -> ServerId {
        self.owner
    }
}

#[derive(Debug, Clone)]
pub struct Envelope<D> {
    pub to: ServerId,
    pub payload: D,
}

pub enum Step<D, O> {
    Send(Vec<Envelope<D>>),
    Halt(O),
}

impl<D: Clone, O> Step<D, O> {
    pub fn broadcast(servers: usize, payload: D) -> Self {
        Step::Send(
            (1..=servers)
                .map(|to| Envelope {
                    to,
                    payload: payload.clone(),
                })
                .collect(),
        )
    }
}

/// What a server step can see: its id, its own input, its own scratch state
/// and the round's random stream.
pub struct ServerCtx<'a, I, L> {
    id: ServerId,
    input: &'a Tagged<I>,
    local: &'a mut L,
    rng: ChaCha8Rng,
}

impl<'a, I, L> ServerCtx<'a, I, L> {
    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn input(&self) -> &'a I {
        &self.input.value
    }

    pub fn local(&mut self) -> &mut L {
        self.local
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Both the local state and the random stream, borrowed together.
    pub fn parts(&mut self) -> (&mut L, &mut ChaCha8Rng) {
        (self.local, &mut self.rng)
    }

    pub fn read<'t, T>(&self, data: &'t Tagged<T>) -> Result<&'t T, FabricError> {
        if data.owner != self.id {
            return Err(FabricError::IsolationViolation {
                server: self.id,
                owner: data.owner,
            });
        }
        Ok(&data.value)
    }

    pub fn fail(&self, reason: impl ToString) -> FabricError {
        FabricError::step_failed(self.id, reason)
    }
}

/// A round-structured distributed program.
///
/// The protocol value itself is the coordinator's state. Server steps are an
/// associated function so they can only reach what the fabric hands them.
pub trait Protocol {
    type Input: Sync;
    type Local: Default + Send;
    type Down: Payload + Sync;
    type Up: Payload + Send;
    type Output;

    /// Upper bound on rounds; exceeding it aborts the run.
    fn round_bound(&self) -> usize;

    /// Called with the number of completed rounds and the (id-sorted) replies
    /// of the last round.
    fn coordinate(
        &mut self,
        completed_rounds: usize,
        replies: Vec<(ServerId, Self::Up)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<Self::Down, Self::Output>, FabricError>;

    fn serve(ctx: &mut ServerCtx<'_, Self::Input, Self::Local>, msg: &Self::Down) -> Result<Self::Up, FabricError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Sequential,
    #[default]
    Parallel,
}

pub struct RunOutcome<O, L> {
    pub output: O,
    pub ledger: CommLedger,
    /// Final server states, index `t − 1` for server `t`.
    pub locals: Vec<L>,
}

/// Deterministic per-(party, round) stream under `master_seed`.
pub fn stream_rng(master_seed: u64, party: ServerId, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((party as u64) << 32) | round as u64);
    rng
}

struct Slot<I, L> {
    id: ServerId,
    input: Tagged<I>,
    local: L,
}

pub fn run_protocol<P: Protocol>(
    protocol: P,
    inputs: Vec<P::Input>,
    master_seed: u64,
) -> Result<RunOutcome<P::Output, P::Local>, FabricError>
where
    P::Input: Send,
{
    run_protocol_with(protocol, inputs, master_seed, Schedule::default())
}

pub fn run_protocol_with<P: Protocol>(
    mut protocol: P,
    inputs: Vec<P::Input>,
    master_seed: u64,
    schedule: Schedule,
) -> Result<RunOutcome<P::Output, P::Local>, FabricError>
where
    P::Input: Send,
{
    let servers = inputs.len();
    if servers == 0 {
        return Err(FabricError::NoServers);
    }
    let mut slots: Vec<Slot<P::Input, P::Local>> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, input)| Slot {
            id: i + 1,
            input: Tagged::new(i + 1, input),
            local: P::Local::default(),
        })
        .collect();
    let mut ledger = CommLedger::new(servers);
    let mut replies: Vec<(ServerId, P::Up)> = Vec::new();
    let bound = protocol.round_bound();

    loop {
        let completed = ledger.rounds();
        let mut cp_rng = stream_rng(master_seed, COORDINATOR, completed + 1);
        let envelopes = match protocol.coordinate(completed, std::mem::take(&mut replies), &mut cp_rng)? {
            Step::Halt(output) => {
                return Ok(RunOutcome {
                    output,
                    ledger,
                    locals: slots.into_iter().map(|s| s.local).collect(),
                })
            }
            Step::Send(envelopes) => envelopes,
        };
        if completed + 1 > bound {
            return Err(FabricError::RoundBoundExceeded { bound });
        }
        let round = ledger.open_round();

        let mut inbox: Vec<Option<&P::Down>> = vec![None; servers];
        for env in &envelopes {
            if env.to == COORDINATOR || env.to > servers {
                return Err(FabricError::Misrouted { to: env.to, servers });
            }
            let slot = &mut inbox[env.to - 1];
            if slot.is_some() {
                return Err(FabricError::DuplicateRecipient { to: env.to, round });
            }
            *slot = Some(&env.payload);
            ledger.record(env.to, Direction::CpToServer, env.payload.words());
        }

        let step = |slot: &mut Slot<P::Input, P::Local>, msg: &P::Down| {
            let mut ctx = ServerCtx {
                id: slot.id,
                input: &slot.input,
                local: &mut slot.local,
                rng: stream_rng(master_seed, slot.id, round),
            };
            let reply = P::serve(&mut ctx, msg)?;
            let sent = reply.words();
            Ok::<_, FabricError>((slot.id, reply, sent))
        };
        let results: Vec<Result<(ServerId, P::Up, usize), FabricError>> = match schedule {
            Schedule::Sequential => slots
                .iter_mut()
                .zip(&inbox)
                .filter_map(|(slot, msg)| msg.map(|m| step(slot, m)))
                .collect(),
            Schedule::Parallel => slots
                .par_iter_mut()
                .zip(inbox.par_iter())
                .filter_map(|(slot, msg)| msg.map(|m| step(slot, m)))
                .collect(),
        };

        for result in results {
            let (id, reply, sent) = result?;
            let received = reply.words();
            if sent != received {
                return Err(FabricError::ConservationMismatch {
                    server: id,
                    sent,
                    received,
                });
            }
            ledger.record(id, Direction::ServerToCp, received);
            replies.push((id, reply));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Silent;

    impl Protocol for Silent {
        type Input = f64;
        type Local = ();
        type Down = ();
        type Up = ();
        type Output = ();

        fn round_bound(&self) -> usize {
            0
        }

        fn coordinate(&mut self, _: usize, _: Vec<(ServerId, ())>, _: &mut ChaCha8Rng) -> Result<Step<(), ()>, FabricError> {
            Ok(Step::Halt(()))
        }

        fn serve(_: &mut ServerCtx<'_, f64, ()>, _: &()) -> Result<(), FabricError> {
            Ok(())
        }
    }

    /// Every server reports its scalar once; the CP sums them.
    struct Gather;

    impl Protocol for Gather {
        type Input = f64;
        type Local = ();
        type Down = ();
        type Up = f64;
        type Output = f64;

        fn round_bound(&self) -> usize {
            1
        }

        fn coordinate(&mut self, done: usize, replies: Vec<(ServerId, f64)>, _: &mut ChaCha8Rng) -> Result<Step<(), f64>, FabricError> {
            if done == 0 {
                Ok(Step::broadcast(3, ()))
            } else {
                Ok(Step::Halt(replies.iter().map(|(_, v)| v).sum()))
            }
        }

        fn serve(ctx: &mut ServerCtx<'_, f64, ()>, _: &()) -> Result<f64, FabricError> {
            Ok(*ctx.input())
        }
    }

    /// Runs forever unless stopped by the round bound.
    struct Chatty;

    impl Protocol for Chatty {
        type Input = f64;
        type Local = ();
        type Down = f64;
        type Up = ();
        type Output = ();

        fn round_bound(&self) -> usize {
            2
        }

        fn coordinate(&mut self, _: usize, _: Vec<(ServerId, ())>, _: &mut ChaCha8Rng) -> Result<Step<f64, ()>, FabricError> {
            Ok(Step::broadcast(1, 1.0))
        }

        fn serve(_: &mut ServerCtx<'_, f64, ()>, _: &f64) -> Result<(), FabricError> {
            Ok(())
        }
    }

    #[test]
    fn silent_protocol_costs_nothing() {
        let out = run_protocol(Silent, vec![1.0, 2.0], 0).unwrap();
        assert_eq!(out.ledger.total_words(), 0);
        assert_eq!(out.ledger.rounds(), 0);
    }

    #[test]
    fn one_scalar_per_server() {
        let out = run_protocol(Gather, vec![1.0, 2.0, 3.0], 9).unwrap();
        assert_eq!(out.output, 6.0);
        assert_eq!(out.ledger.total_words(), 3);
        assert_eq!(out.ledger.rounds(), 1);
        assert!(out.ledger.entries().iter().all(|e| e.round == 1));
    }

    #[test]
    fn round_bound_is_enforced() {
        assert!(matches!(
            run_protocol(Chatty, vec![0.0], 0),
            Err(FabricError::RoundBoundExceeded { bound: 2 })
        ));
    }

    #[test]
    fn no_servers_is_rejected() {
        assert!(matches!(run_protocol(Gather, vec![], 0), Err(FabricError::NoServers)));
    }

    #[test]
    fn streams_differ_by_party_and_round() {
        let a: u64 = stream_rng(1, 1, 1).random();
        let b: u64 = stream_rng(1, 2, 1).random();
        let c: u64 = stream_rng(1, 1, 2).random();
        let a2: u64 = stream_rng(1, 1, 1).random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    /// Server 1 tries to read a value tagged as server 2's.
    struct Snoop;

    impl Protocol for Snoop {
        type Input = f64;
        type Local = ();
        type Down = ();
        type Up = f64;
        type Output = ();

        fn round_bound(&self) -> usize {
            1
        }

        fn coordinate(&mut self, done: usize, _: Vec<(ServerId, f64)>, _: &mut ChaCha8Rng) -> Result<Step<(), ()>, FabricError> {
            Ok(if done == 0 { Step::broadcast(2, ()) } else { Step::Halt(()) })
        }

        fn serve(ctx: &mut ServerCtx<'_, f64, ()>, _: &()) -> Result<f64, FabricError> {
            let foreign = Tagged::new(2, 7.0);
            Ok(*ctx.read(&foreign)?)
        }
    }

    /// Two rounds of random draws; output is every reply in order.
    struct Noisy;

    impl Protocol for Noisy {
        type Input = f64;
        type Local = Vec<f64>;
        type Down = f64;
        type Up = Vec<f64>;
        type Output = Vec<f64>;

        fn round_bound(&self) -> usize {
            2
        }

        fn coordinate(
            &mut self,
            done: usize,
            replies: Vec<(ServerId, Vec<f64>)>,
            rng: &mut ChaCha8Rng,
        ) -> Result<Step<f64, Vec<f64>>, FabricError> {
            if done < 2 {
                Ok(Step::broadcast(6, rng.random()))
            } else {
                Ok(Step::Halt(replies.into_iter().flat_map(|(_, v)| v).collect()))
            }
        }

        fn serve(ctx: &mut ServerCtx<'_, f64, Vec<f64>>, msg: &f64) -> Result<Vec<f64>, FabricError> {
            let x = *ctx.input() + msg;
            let (local, rng) = ctx.parts();
            local.push(x * rng.random::<f64>());
            Ok(local.clone())
        }
    }

    #[test]
    fn foreign_read_is_rejected() {
        let err = run_protocol(Snoop, vec![1.0, 2.0], 0).err().unwrap();
        assert!(matches!(err, FabricError::IsolationViolation { server: 1, owner: 2 }));
    }

    #[test]
    fn sequential_and_parallel_schedules_agree() {
        let inputs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        for seed in [0, 1, 99] {
            let a = run_protocol_with(Noisy, inputs.clone(), seed, Schedule::Sequential).unwrap();
            let b = run_protocol_with(Noisy, inputs.clone(), seed, Schedule::Parallel).unwrap();
            assert_eq!(a.output, b.output);
            assert_eq!(a.ledger, b.ledger);
            assert_eq!(a.locals, b.locals);
        }
    }

    #[test]
    fn ledger_has_only_star_edges() {
        let out = run_protocol(Noisy, vec![0.5; 6], 4).unwrap();
        let rounds: Vec<usize> = out.ledger.entries().iter().map(|e| e.round).collect();
        assert!(rounds.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
        assert_eq!(rounds.first(), Some(&1));
        for e in out.ledger.entries() {
            assert!((1..=6).contains(&e.server));
        }
        assert_eq!(out.ledger.words_in(Direction::CpToServer), 12);
        assert_eq!(out.ledger.words_in(Direction::ServerToCp), 6 + 12);
    }

    #[test]
    fn misrouted_and_duplicate_messages_abort() {
        struct Bad(Vec<ServerId>);
        impl Protocol for Bad {
            type Input = ();
            type Local = ();
            type Down = ();
            type Up = ();
            type Output = ();
            fn round_bound(&self) -> usize {
                1
            }
            fn coordinate(&mut self, _: usize, _: Vec<(ServerId, ())>, _: &mut ChaCha8Rng) -> Result<Step<(), ()>, FabricError> {
                Ok(Step::Send(self.0.iter().map(|&to| Envelope { to, payload: () }).collect()))
            }
            fn serve(_: &mut ServerCtx<'_, (), ()>, _: &()) -> Result<(), FabricError> {
                Ok(())
            }
        }
        assert!(matches!(run_protocol(Bad(vec![0]), vec![()], 0), Err(FabricError::Misrouted { to: 0, .. })));
        assert!(matches!(run_protocol(Bad(vec![2]), vec![()], 0), Err(FabricError::Misrouted { to: 2, .. })));
        assert!(matches!(
            run_protocol(Bad(vec![1, 1]), vec![()], 0),
            Err(FabricError::DuplicateRecipient { to: 1, round: 1 })
        ));
    }
}
