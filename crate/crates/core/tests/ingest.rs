use std::collections::BTreeMap;

use ktformer::data::{
    filter_and_group, parse_interactions, parse_questions, write_questions, ContentType, Correctness,
    InteractionRecord, InteractionWriter, QuestionMeta,
};
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = InteractionRecord> {
    (
        (0u64..1_000_000, 0i64..i64::MAX / 2, 0u64..50, 0u64..20_000),
        (any::<bool>(), 0i64..10_000, any::<bool>()),
        (proptest::option::of(0u64..400_000), proptest::option::of(any::<bool>())),
    )
        .prop_map(|((row_id, ts, user, content), (lecture, container, correct), (elapsed, expl))| InteractionRecord {
            row_id,
            timestamp_ms: ts,
            user_id: user,
            content_id: content,
            content_type: if lecture { ContentType::Lecture } else { ContentType::Question },
            task_container_id: container,
            answered_correctly: match (lecture, correct) {
                (true, _) => Correctness::NotApplicable,
                (false, true) => Correctness::Correct,
                (false, false) => Correctness::Incorrect,
            },
            prior_elapsed_ms: elapsed,
            prior_had_explanation: expl,
        })
}

fn to_csv(records: &[InteractionRecord]) -> Vec<u8> {
    let mut w = InteractionWriter::new(Vec::new()).unwrap();
    for r in records {
        let answer = if r.content_type == ContentType::Lecture { -1 } else { 2 };
        w.write(r, answer).unwrap();
    }
    w.finish().unwrap()
}

proptest! {
    #[test]
    fn csv_round_trip_preserves_records_and_order(records in proptest::collection::vec(record_strategy(), 0..60)) {
        let parsed = parse_interactions(to_csv(&records).as_slice()).unwrap();
        prop_assert_eq!(parsed, records);
    }

    #[test]
    fn grouping_keeps_exactly_the_question_rows(records in proptest::collection::vec(record_strategy(), 0..80)) {
        let mut expected: Vec<u64> = records
            .iter()
            .filter(|r| r.content_type == ContentType::Question)
            .map(|r| r.row_id)
            .collect();
        let histories = filter_and_group(records.clone());
        let mut got: Vec<u64> = histories.iter().flat_map(|h| h.events.iter().map(|e| e.row_id)).collect();
        expected.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, expected);

        prop_assert!(histories.windows(2).all(|w| w[0].user_id < w[1].user_id));
        for h in &histories {
            prop_assert!(h.events.iter().all(|e| e.user_id == h.user_id));
            prop_assert!(h.events.windows(2).all(|w| (w[0].timestamp_ms, w[0].row_id) <= (w[1].timestamp_ms, w[1].row_id)));
        }
    }

    #[test]
    fn question_table_round_trip(parts in proptest::collection::btree_map(0u64..10_000, 1u8..=7, 0..40)) {
        let questions: Vec<(QuestionMeta, u8)> = parts
            .iter()
            .map(|(&id, &part)| (QuestionMeta { question_id: id, part }, (id % 4) as u8))
            .collect();
        let mut bytes = Vec::new();
        write_questions(&mut bytes, &questions).unwrap();
        let parsed = parse_questions(bytes.as_slice()).unwrap();
        let expected: BTreeMap<u64, QuestionMeta> = questions.iter().map(|(m, _)| (m.question_id, *m)).collect();
        prop_assert_eq!(parsed, expected);
    }
}

#[test]
fn shuffled_single_user_is_sorted() {
    let text = "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,answered_correctly,prior_question_elapsed_time,prior_question_had_explanation\n\
                0,500,7,1,0,0,1,1,,\n\
                1,100,7,2,0,1,2,0,1000,true\n\
                2,300,7,3,0,2,0,1,2000,false\n";
    let histories = filter_and_group(parse_interactions(text.as_bytes()).unwrap());
    assert_eq!(histories.len(), 1);
    let ts: Vec<i64> = histories[0].events.iter().map(|e| e.timestamp_ms).collect();
    assert_eq!(ts, [100, 300, 500]);
}

#[test]
fn only_lectures_give_no_histories() {
    let text = "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,answered_correctly,prior_question_elapsed_time,prior_question_had_explanation\n\
                0,0,1,9,1,0,-1,-1,,\n\
                1,5,2,9,1,0,-1,-1,,\n";
    assert!(filter_and_group(parse_interactions(text.as_bytes()).unwrap()).is_empty());
}
