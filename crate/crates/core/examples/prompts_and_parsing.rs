//! Renders the built-in prompt templates, then parses model replies.

use vap::evalharness::{Answer, QAItem};
use vap::vlmclient::{parse_answer, render_prompt, PromptTemplate, TemplateId, GARBAGE_RESPONSES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let item = QAItem {
        item_id: "q1".into(),
        video_id: "v1".into(),
        question: "What does the person do after opening the fridge?".into(),
        options: [
            "pours milk",
            "closes it",
            "takes an egg",
            "leaves",
            "sits down",
        ]
        .map(String::from)
        .to_vec(),
        answer: Answer::Choice(2),
        qtype: None,
    };
    for id in [
        TemplateId::Egoschema,
        TemplateId::NextqaNumeric,
        TemplateId::GenerationConditioning,
    ] {
        let req = render_prompt(&PromptTemplate::builtin(id), &item, &[])?;
        println!("--- {id}\n{}\n", req.text());
    }
    let replies = [
        (
            "The person reaches in.\nFinal Answer: (2)",
            TemplateId::Egoschema,
        ),
        ("Final Answer: 0, 2", TemplateId::ClevrerMcq),
        ("Yes.", TemplateId::ClevrerBinary),
        ("Playing the guitar", TemplateId::AnetWord),
    ];
    for (text, id) in replies.into_iter().chain(
        GARBAGE_RESPONSES
            .iter()
            .map(|g| (*g, TemplateId::Egoschema)),
    ) {
        match parse_answer(text, id) {
            Ok(p) => println!("{id:<14} {text:?} -> {:?}", p.value),
            Err(e) => println!("{id:<14} {e}"),
        }
    }
    Ok(())
}
