use std::collections::BTreeMap;

use hpotriage_core::protocol::{parse_line, Message, Orientation};
use hpotriage_core::space::{Scalar, TrialConfig};
use proptest::prelude::*;

#[test]
fn conformance_fixture() {
    let text = include_str!("../fixtures/protocol_conformance.txt");
    let mut cases = 0;
    for (n, raw) in text.lines().enumerate() {
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        cases += 1;
        let fields: Vec<&str> = raw.splitn(3, '\t').collect();
        match fields.as_slice() {
            ["ok", line] => {
                let msg = parse_line(line, n + 1)
                    .unwrap_or_else(|e| panic!("fixture line {}: {e}", n + 1));
                // accepted lines survive a re-encode
                assert_eq!(parse_line(&msg.to_line(), 1).unwrap(), msg);
            }
            ["err", fragment, line] => {
                let err = parse_line(line, n + 1).expect_err(line);
                assert_eq!(err.line, n + 1);
                assert!(
                    err.message.contains(fragment),
                    "fixture line {}: `{}` lacks `{fragment}`",
                    n + 1,
                    err.message
                );
            }
            _ => panic!("fixture line {} is malformed", n + 1),
        }
    }
    assert!(cases >= 20);
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO
}

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        any::<i64>().prop_map(Scalar::Int),
        prop::num::f64::NORMAL.prop_map(Scalar::Real),
        "[a-z]{1,8}".prop_map(Scalar::Text),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        ("[a-zA-Z0-9 _-]{0,12}", prop_oneof![Just(Orientation::Max), Just(Orientation::Min)])
            .prop_map(|(task, orientation)| Message::Hello { task, orientation }),
        (
            any::<u64>(),
            prop::collection::btree_map("[a-z_]{1,10}", scalar(), 0..6),
            1u32..50,
            1u32..20,
            any::<u64>()
        )
            .prop_map(|(trial_id, a, epochs, checkpoints_per_epoch, training_seed)| {
                Message::StartTrial {
                    trial_id,
                    config: TrialConfig {
                        assignments: BTreeMap::from_iter(a),
                    },
                    epochs,
                    checkpoints_per_epoch,
                    training_seed,
                }
            }),
        (any::<u64>(), 1u32..10_000, finite(), finite(), 0.0f64..1e6).prop_map(
            |(trial_id, step, val_metric, val_loss, cost_seconds)| Message::Report {
                trial_id,
                step,
                val_metric,
                val_loss,
                cost_seconds,
            }
        ),
        any::<u64>().prop_map(|trial_id| Message::Stop { trial_id }),
        (any::<u64>(), prop::option::of(1u32..100), prop::option::of(finite())).prop_map(
            |(trial_id, best_step, test_metric_at_best)| Message::Final {
                trial_id,
                best_step,
                test_metric_at_best,
            }
        ),
        ".{0,40}".prop_map(|message| Message::Error { message }),
    ]
}

proptest! {
    #[test]
    fn encoded_messages_parse_back(msg in message()) {
        let line = msg.to_line();
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(parse_line(&line, 1).unwrap(), msg);
    }
}
