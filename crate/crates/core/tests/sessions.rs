mod common;

use common::*;
use taskprompt::eval::Strategy;
use taskprompt::gateway::{Gateway, ResponseCache};
use taskprompt::session::{
    replay_session, Decision, ProposalSource, Session, SessionConfig, SessionError, SessionEvent, SessionStatus, Verdict,
};
use taskprompt::steps::UnparsableReason;

fn accept(id: &str) -> Decision {
    Decision {
        proposal_id: Some(id.into()),
        verdict: Verdict::Accept,
        edited_text: None,
    }
}

fn reject(id: &str) -> Decision {
    Decision {
        proposal_id: Some(id.into()),
        verdict: Verdict::Reject,
        edited_text: None,
    }
}

fn texts(s: &Session) -> Vec<(String, f64)> {
    s.pending_proposals.iter().map(|p| (p.step_text.clone(), p.score)).collect()
}

fn first_id(s: &Session) -> String {
    s.pending_proposals[0].id.clone()
}

#[test]
fn iterative_proposals_follow_the_distribution() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let s = Session::open("s1", conference_room(), 0, SessionConfig::default(), fx.ctx(&gw)).unwrap();
    assert_eq!(
        texts(&s),
        [("Pick up can".to_string(), 0.48), ("Take can to kitchen".to_string(), 0.40)]
    );
    assert!(s.pending_proposals.iter().all(|p| p.source == ProposalSource::IterativeBranch));
}

#[test]
fn batch_greedy_gives_one_proposal() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let config = SessionConfig {
        strategy: Strategy::Batch,
        ..SessionConfig::default()
    };
    let s = Session::open("s1", conference_room(), 0, config, fx.ctx(&gw)).unwrap();
    assert_eq!(s.pending_proposals.len(), 1);
    assert_eq!(s.pending_proposals[0].step_text, "Pick up can");
}

#[test]
fn invalid_target_opens_nothing() {
    let fx = Fixtures::load();
    let transport = can_transport();
    let gw = scripted_gateway(transport.clone());
    let err = Session::open("s1", conference_room(), 42, SessionConfig::default(), fx.ctx(&gw)).unwrap_err();
    assert_eq!(err, SessionError::InvalidTarget { index: 42 });
    assert_eq!(transport.calls(), 0);
}

#[test]
fn walk_the_can_transcript() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let ctx = fx.ctx(&gw);
    let mut s = Session::open("s1", conference_room(), 0, SessionConfig::default(), ctx).unwrap();
    s.apply_decision(&accept(&first_id(&s)), ctx).unwrap();
    assert_eq!(s.accepted_steps[0].verb, "pick up");
    assert!(s.current_prompt(&fx.library).unwrap().text.ends_with("1. Pick up can\n2. "));
    assert_eq!(texts(&s)[0].0, "Take can to kitchen");
    s.apply_decision(&accept(&first_id(&s)), ctx).unwrap();
    assert_eq!(texts(&s)[0].0, "Put can in recycling bin");
    s.apply_decision(&accept(&first_id(&s)), ctx).unwrap();
    assert!(s.pending_proposals[0].ends_task);
    s.apply_decision(&accept(&first_id(&s)), ctx).unwrap();
    assert_eq!(s.status, SessionStatus::Finished);
    let learned = s.learned.clone().unwrap();
    assert_eq!(learned.steps, ["Pick up can", "Take can to kitchen", "Put can in recycling bin"]);
    assert_eq!(learned.goal, None);
    assert_eq!(s.apply_decision(&accept("p1"), ctx), Err(SessionError::SessionNotActive));
}

#[test]
fn rejecting_everything_needs_instruction() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let ctx = fx.ctx(&gw);
    let mut s = Session::open("s1", conference_room(), 0, SessionConfig::default(), ctx).unwrap();
    let ids: Vec<_> = s.pending_proposals.iter().map(|p| p.id.clone()).collect();
    for id in &ids {
        s.apply_decision(&reject(id), ctx).unwrap();
    }
    assert!(s.pending_proposals.is_empty());
    assert!(s.needs_instruction);

    let typed = Decision {
        proposal_id: None,
        verdict: Verdict::Edit,
        edited_text: Some("Pick up can".into()),
    };
    s.apply_decision(&typed, ctx).unwrap();
    assert!(!s.needs_instruction);
    assert_eq!(s.accepted_steps.len(), 1);
}

#[test]
fn edits_must_parse() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let ctx = fx.ctx(&gw);
    let mut s = Session::open("s1", conference_room(), 0, SessionConfig::default(), ctx).unwrap();
    let before = s.clone();
    let edit = Decision {
        proposal_id: Some(first_id(&s)),
        verdict: Verdict::Edit,
        edited_text: Some("Levitate can".into()),
    };
    assert_eq!(
        s.apply_decision(&edit, ctx),
        Err(SessionError::UneditableParse(UnparsableReason::UnknownVerb))
    );
    assert_eq!(s, before);
    assert_eq!(
        s.apply_decision(&accept("nope"), ctx),
        Err(SessionError::UnknownProposal("nope".into()))
    );
}

#[test]
fn finish_rules() {
    let fx = Fixtures::load();
    let gw = scripted_gateway(can_transport());
    let ctx = fx.ctx(&gw);
    let mut s = Session::open("s1", conference_room(), 1, SessionConfig::default(), ctx).unwrap();
    assert_eq!(s.finish(true, ctx), Err(SessionError::NoAcceptedSteps));
    s.apply_decision(&accept(&first_id(&s)), ctx).unwrap();
    let learned = s.finish(true, ctx).unwrap();
    let goal = learned.goal.unwrap();
    assert_eq!(
        (goal.object_phrase.as_str(), goal.relation.as_str(), goal.target_phrase.as_str()),
        ("plastic bottle", "in", "recycling bin")
    );
    assert_eq!(s.finish(false, ctx), Err(SessionError::SessionNotActive));
}

#[test]
fn event_log_replays_over_warm_cache() {
    let fx = Fixtures::load();
    let dir = tempfile::tempdir().unwrap();
    let transport = can_transport();
    let live = scripted_gateway(transport.clone()).with_cache(ResponseCache::open(dir.path()).unwrap());
    let ctx = fx.ctx(&live);
    let mut s = Session::open("s7", conference_room(), 1, SessionConfig::default(), ctx).unwrap();
    let mut log = vec![s.opened_event()];
    for _ in 0..3 {
        let d = accept(&first_id(&s));
        s.apply_decision(&d, ctx).unwrap();
        log.push(SessionEvent::Decided { decision: d });
    }
    s.finish(true, ctx).unwrap();
    log.push(SessionEvent::Finished { elicit_goal: true });
    let calls = transport.calls();

    let json: Vec<String> = log.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    let restored: Vec<SessionEvent> = json.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let replay = Gateway::replay_only(ResponseCache::open(dir.path()).unwrap());
    let again = replay_session(&restored, fx.ctx(&replay)).unwrap();
    assert_eq!(again, s);
    assert_eq!(transport.calls(), calls);
    assert_eq!(
        again.learned.unwrap().steps,
        ["Pick up bottle", "Empty bottle", "Put bottle in recycling bin"]
    );
}
