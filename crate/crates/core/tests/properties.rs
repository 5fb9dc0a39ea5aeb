use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use pigpaxos::config::partition_followers;
use pigpaxos::engine::{ElectionOutcome, PaxosEngine, ProposeOutcome};
use pigpaxos::model::{self, LoadModelRow};
use pigpaxos::msg::*;
use pigpaxos::pig::{select_relays, GrayList, GrayListEvent};
use pigpaxos::sim::{FaultAction, FaultEvent, NetworkProfile, SimConfig, Simulation};
use pigpaxos::types::{Command, Op};
use pigpaxos::{wire, Ballot, ClusterConfig, NodeId, Rational64, Slot, Time};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

// wire -----------------------------------------------------------------------

fn ballot() -> impl Strategy<Value = Ballot> {
    (any::<u64>(), any::<u32>()).prop_map(|(r, p)| Ballot::new(r, p))
}

fn node() -> impl Strategy<Value = NodeId> {
    any::<u32>().prop_map(NodeId)
}

fn nodes() -> impl Strategy<Value = Vec<NodeId>> {
    prop::collection::btree_set(node(), 0..12).prop_map(|s| s.into_iter().collect())
}

fn bytes(max: usize) -> impl Strategy<Value = Bytes> {
    prop::collection::vec(any::<u8>(), 0..max).prop_map(Bytes::from)
}

fn command() -> impl Strategy<Value = Arc<Command>> {
    (prop_oneof![Just(Op::Put), Just(Op::Get), Just(Op::Noop)], bytes(40), bytes(300), any::<u64>(), any::<u64>())
        .prop_map(|(op, key, value, client_id, request_seq)| Arc::new(Command { op, key, value, client_id, request_seq }))
}

fn accepted() -> impl Strategy<Value = Vec<AcceptedEntry>> {
    prop::collection::vec(
        (any::<u64>(), ballot(), command()).prop_map(|(s, ballot, command)| AcceptedEntry { slot: Slot(s), ballot, command }),
        0..4,
    )
}

fn outcome() -> impl Strategy<Value = ReplyOutcome> {
    prop_oneof![
        Just(ReplyOutcome::Stored),
        bytes(64).prop_map(ReplyOutcome::Value),
        Just(ReplyOutcome::Absent),
        proptest::option::of(node()).prop_map(|hint| ReplyOutcome::NotLeader { hint }),
    ]
}

fn pig_id() -> impl Strategy<Value = PigMsgId> {
    (node(), any::<u64>()).prop_map(|(initiator, sequence)| PigMsgId { initiator, sequence })
}

fn flat_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (ballot(), any::<u64>()).prop_map(|(ballot, s)| Message::P1a(P1a { ballot, from_slot: Slot(s) })),
        (ballot(), node(), accepted()).prop_map(|(ballot, voter, accepted)| Message::P1b(P1b { ballot, voter, accepted })),
        (ballot(), any::<u64>(), command(), proptest::option::of(any::<u64>())).prop_map(|(ballot, s, command, c)| {
            Message::P2a(P2a { ballot, slot: Slot(s), command, commit_up_to: c.map(Slot) })
        }),
        (ballot(), any::<u64>(), node(), proptest::option::of(ballot())).prop_map(|(ballot, s, voter, reject_ballot)| {
            Message::P2b(P2b { ballot, slot: Slot(s), voter, reject_ballot })
        }),
        (any::<u64>(), command()).prop_map(|(s, command)| Message::P3(P3 { slot: Slot(s), command })),
        (
            pig_id(),
            prop_oneof![Just(Phase::One), Just(Phase::Two)],
            ballot(),
            any::<u64>(),
            any::<u32>(),
            nodes(),
            proptest::option::of(ballot()),
            accepted()
        )
            .prop_map(|(pig_id, phase, ballot, s, ack_count, missing_voters, reject_ballot, accepted)| {
                Message::Aggregated(AggregatedReply {
                    pig_id,
                    phase,
                    ballot,
                    slot: Slot(s),
                    ack_count,
                    missing_voters,
                    reject_ballot,
                    accepted,
                })
            }),
        command().prop_map(Message::ClientRequest),
        (any::<u64>(), any::<u64>(), outcome()).prop_map(|(client_id, request_seq, outcome)| {
            Message::ClientReply(ClientReply { client_id, request_seq, outcome })
        }),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        4 => flat_message(),
        1 => (pig_id(), nodes(), flat_message()).prop_map(|(pig_id, group_members, inner)| {
            Message::Envelope(PigEnvelope { pig_id, group_members, payload: Box::new(inner) })
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn wire_round_trip(msg in message()) {
        let frame = wire::encode(&msg);
        prop_assert_eq!(frame.len(), wire::encoded_len(&msg));
        prop_assert_eq!(wire::decode(&frame).unwrap(), msg.clone());
        let mut buf = BytesMut::from(&frame[..]);
        prop_assert_eq!(wire::split_frame(&mut buf).unwrap(), Some(msg));
        prop_assert!(buf.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn truncated_frames_are_rejected(msg in message(), cut in any::<prop::sample::Index>()) {
        let frame = wire::encode(&msg);
        let at = cut.index(frame.len());
        prop_assert!(wire::decode(&frame[..at]).is_err());
    }
}

// relay selection ------------------------------------------------------------

fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn relay_draws_are_uniform() {
    let groups = partition_followers(9, 1, NodeId(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0u64; 8];
    for _ in 0..80_000 {
        let r = select_relays(&groups, None, Time::ZERO, &mut rng)[0];
        counts[r.index() - 1] += 1;
    }
    let sigma = (80_000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    for c in counts {
        assert!((c as f64 - 10_000.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
    assert!(chi_square_p(&counts) > 0.01, "{counts:?}");
}

#[test]
fn relays_rotate_uniformly_in_a_long_run() {
    let mut cfg = SimConfig::new(ClusterConfig::new(13, 3));
    cfg.trace_relays = true;
    cfg.workload.clients = 4;
    cfg.workload.duration_ms = 5_000;
    cfg.seed = 31;
    let rep = Simulation::new(cfg).unwrap().run();
    let groups = partition_followers(13, 3, NodeId(0)).unwrap();
    for g in &groups.groups {
        let counts: Vec<u64> =
            g.iter().map(|m| rep.relay_trace.iter().filter(|(_, i, r)| *i == NodeId(0) && r == m).count() as u64).collect();
        assert!(counts.iter().sum::<u64>() > 1_000);
        assert!(chi_square_p(&counts) > 0.01, "group {g:?}: {counts:?}");
    }
}

#[test]
fn gray_listed_node_is_skipped_without_probes() {
    let groups = pigpaxos::RelayGroupConfig { leader: NodeId(0), groups: vec![vec![NodeId(1), NodeId(2), NodeId(3)]] };
    let mut gl = GrayList::new(Duration::from_secs(5), 0.0);
    gl.update(NodeId(2), GrayListEvent::RelayTimeout, Time::ZERO);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5_000 {
        assert_ne!(select_relays(&groups, Some(&gl), Time::from_millis(4_999), &mut rng)[0], NodeId(2));
    }
    // eligible again after expiry
    let after = Time::from_millis(5_000);
    assert!((0..5_000).any(|_| select_relays(&groups, Some(&gl), after, &mut rng)[0] == NodeId(2)));
}

#[test]
fn fully_listed_group_falls_back_to_its_members() {
    let groups = pigpaxos::RelayGroupConfig { leader: NodeId(0), groups: vec![vec![NodeId(1)]] };
    let mut gl = GrayList::new(Duration::from_secs(5), 0.0);
    gl.update(NodeId(1), GrayListEvent::RelayTimeout, Time::ZERO);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(select_relays(&groups, Some(&gl), Time::ZERO, &mut rng), vec![NodeId(1)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Gray-listing a minority never blocks commits; it only biases picks.
    #[test]
    fn minority_gray_list_keeps_liveness(seed in any::<u64>(), r in 1usize..4) {
        let mut c = ClusterConfig::new(7, r);
        c.graylist.enabled = true;
        let mut cfg = SimConfig::new(c);
        cfg.seed = seed;
        cfg.workload.max_ops = Some(50);
        cfg.workload.duration_ms = 20_000;
        cfg.faults = vec![FaultEvent { at_ms: 0, action: FaultAction::Crash, nodes: vec![NodeId(2), NodeId(5)] }];
        let rep = Simulation::new(cfg).unwrap().run();
        prop_assert!(rep.metrics.ops >= 50);
        prop_assert!(rep.violations.is_empty());
    }
}

// engine ---------------------------------------------------------------------

fn elected(n: usize) -> Vec<PaxosEngine> {
    let mut engines: Vec<PaxosEngine> = (0..n as u32).map(|i| PaxosEngine::new(NodeId(i), n)).collect();
    let p1a = engines[0].start_election();
    let replies: Vec<P1b> = engines[1..].iter_mut().map(|e| e.on_p1a(&p1a)).collect();
    match engines[0].on_p1b_quorum(&replies) {
        ElectionOutcome::Elected(p2as) => {
            for p2a in p2as {
                for i in 1..n {
                    let b = engines[i].on_p2a(&p2a);
                    engines[0].on_vote(b.slot, b.voter, b.ballot);
                }
            }
        }
        other => panic!("not elected: {other:?}"),
    }
    engines
}

/// Commits `commands` delivering every P2b `copies` times, in an order
/// given by `order`. Returns the leader's committed log and its stats.
fn replicate(n: usize, commands: &[u8], copies: usize, order: &[usize]) -> (Vec<(u64, Arc<Command>)>, u64) {
    let mut engines = elected(n);
    for (seq, k) in commands.iter().enumerate() {
        let cmd = Arc::new(Command::put(1, seq as u64, vec![*k], vec![*k; 3]));
        let ProposeOutcome::Proposed(p2a) = engines[0].propose(cmd) else { panic!("leader") };
        let mut votes: Vec<P2b> = (1..n).map(|i| engines[i].on_p2a(&p2a)).collect();
        votes = votes.iter().cycle().take(votes.len() * copies).cloned().collect();
        let len = votes.len();
        for (i, &o) in order.iter().enumerate().take(len) {
            votes.swap(i, o % len);
        }
        for v in votes {
            engines[0].on_vote(v.slot, v.voter, v.ballot);
        }
    }
    let e = &engines[0];
    let log = (0..e.committed_prefix().0).map(|s| (s, e.entry(Slot(s)).unwrap().command.clone())).collect();
    (log, e.stats.duplicate_votes)
}

proptest! {
    #[test]
    fn duplicated_votes_change_no_commit(
        n in 3usize..9,
        commands in prop::collection::vec(any::<u8>(), 1..20),
        order in prop::collection::vec(any::<usize>(), 0..40),
    ) {
        let (once, d1) = replicate(n, &commands, 1, &order);
        let (twice, d2) = replicate(n, &commands, 2, &order);
        prop_assert_eq!(once, twice);
        prop_assert_eq!(d1, 0);
        prop_assert_eq!(d2, ((n - 1) * commands.len()) as u64);
    }

    #[test]
    fn ballots_never_regress(steps in prop::collection::vec((0u64..6, 0u32..5), 1..40)) {
        let mut e = PaxosEngine::new(NodeId(1), 5);
        let mut last = e.ballot();
        for (round, proposer) in steps {
            let b = Ballot::new(round, proposer);
            e.on_p1a(&P1a { ballot: b, from_slot: Slot(0) });
            prop_assert!(e.ballot() >= last);
            prop_assert_eq!(e.ballot(), last.max(b));
            last = e.ballot();
        }
    }
}

// model ----------------------------------------------------------------------

proptest! {
    #[test]
    fn load_model_identities(n in 3u64..400, r_frac in 0.0f64..1.0) {
        let r = 1 + ((n - 2) as f64 * r_frac) as u64;
        let exact = LoadModelRow::<Rational64>::new(n, r).unwrap();
        // independent closed forms, written out here
        prop_assert_eq!(exact.leader, Rational64::from_integer(2 * r as i64 + 2));
        let mf = Rational64::from_integer(4) - Rational64::new(2 * r as i64, n as i64 - 1);
        prop_assert_eq!(exact.follower, mf);
        prop_assert_eq!(model::follower_load_expanded::<Rational64>(n, r).unwrap(), mf);
        let f64_row = LoadModelRow::<f64>::new(n, r).unwrap();
        let f32_row = LoadModelRow::<f32>::new(n, r).unwrap();
        let as_f64 = *mf.numer() as f64 / *mf.denom() as f64;
        prop_assert!((f64_row.follower - as_f64).abs() < 1e-12);
        prop_assert!((f32_row.follower as f64 - as_f64).abs() < 1e-5);
        // followers never exceed the asymptote
        prop_assert!(exact.follower < Rational64::from_integer(4));
        let groups = partition_followers(n as usize, r as usize, NodeId(0)).unwrap();
        prop_assert_eq!(model::total_messages_by_role(&groups), 2 * n - 1);
        prop_assert_eq!(model::total_messages(n).unwrap(), 2 * n - 1);
    }

    #[test]
    fn group_partition_is_balanced(n in 2usize..200, r_frac in 0.0f64..1.0, leader in 0usize..200) {
        let r = 1 + ((n - 2) as f64 * r_frac) as usize;
        let leader = NodeId((leader % n) as u32);
        let g = partition_followers(n, r, leader).unwrap();
        let sizes = g.group_sizes();
        prop_assert_eq!(sizes.len(), r);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let members = g.members();
        prop_assert_eq!(members.len(), n - 1);
        prop_assert!(!members.contains(&leader));
    }
}

// simulator ------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn accounting_balances_and_runs_repeat(seed in any::<u64>(), drop in 0.0f64..0.1, dup in 0.0f64..0.1) {
        let mut cfg = SimConfig::new(ClusterConfig::new(5, 2));
        cfg.seed = seed;
        cfg.profile = NetworkProfile { drop_probability: drop, duplicate_probability: dup, ..NetworkProfile::lan() };
        cfg.workload.clients = 3;
        cfg.workload.duration_ms = 1_000;
        let a = Simulation::new(cfg.clone()).unwrap().run();
        let b = Simulation::new(cfg).unwrap().run();
        prop_assert!(a.metrics.accounting.balanced());
        prop_assert!(a.violations.is_empty());
        prop_assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    }
}

#[test]
fn majority_crash_stops_commits() {
    let mut cfg = SimConfig::new(ClusterConfig::new(5, 2));
    cfg.workload.clients = 2;
    cfg.workload.duration_ms = 3_000;
    cfg.faults = vec![FaultEvent { at_ms: 1_500, action: FaultAction::Crash, nodes: vec![NodeId(2), NodeId(3), NodeId(4)] }];
    let rep = Simulation::new(cfg).unwrap().run();
    // replies can still be in flight right at the crash
    let late = rep
        .completed()
        .filter(|h| h.invoked > Time::from_millis(1_510) && h.completed.as_ref().is_some_and(|(_, o)| !matches!(o, ReplyOutcome::NotLeader { .. })))
        .count();
    assert_eq!(late, 0);
    assert!(rep.metrics.ops > 0);
}

#[test]
fn minority_crash_keeps_serving() {
    let mut cfg = SimConfig::new(ClusterConfig::new(5, 2));
    cfg.workload.clients = 2;
    cfg.workload.duration_ms = 3_000;
    cfg.workload.duration_ms = 8_000;
    cfg.faults = vec![FaultEvent { at_ms: 1_500, action: FaultAction::Crash, nodes: vec![NodeId(0), NodeId(4)] }];
    let rep = Simulation::new(cfg).unwrap().run();
    // the leader was among the crashed; a successor must take over
    assert!(rep.completed().any(|h| h.invoked > Time::from_millis(5_000)));
    assert_ne!(rep.metrics.leader, Some(NodeId(0)));
    assert!(rep.violations.is_empty());
    pigpaxos::linearizability::check_history(&rep.history).unwrap();
}

#[test]
fn aggregated_replies_list_only_missing_voters() {
    let agg = AggregatedReply {
        pig_id: PigMsgId { initiator: NodeId(0), sequence: 1 },
        phase: Phase::Two,
        ballot: Ballot::new(1, 0),
        slot: Slot(0),
        ack_count: 7,
        missing_voters: BTreeSet::from([NodeId(5)]).into_iter().collect(),
        reject_ballot: None,
        accepted: vec![],
    };
    let with_one = wire::encoded_len(&Message::Aggregated(agg.clone()));
    let none = wire::encoded_len(&Message::Aggregated(AggregatedReply { missing_voters: vec![], ..agg }));
    assert_eq!(with_one - none, 4);
}
