use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use super::ast::Program;
use super::eval::EvalInput;
use super::parser::{compile, DslContext};
use super::prompt::PromptBundle;
use crate::dynmodel::DynamicsModel;
use crate::error::{Error, Result};
use crate::guidance::GuideInput;

pub const ENV_URL: &str = "CDIFF_LLM_URL";
pub const ENV_MODEL: &str = "CDIFF_LLM_MODEL";
pub const ENV_API_KEY: &str = "CDIFF_LLM_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

pub trait LlmClient {
    fn complete(&mut self, messages: &[Message]) -> Result<String>;
}

/// Replays recorded responses in order.
#[derive(Clone, Debug)]
pub struct FixtureClient {
    responses: VecDeque<String>,
    pub calls: usize,
}

impl FixtureClient {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses: responses.into(),
            calls: 0,
        }
    }

    /// Responses separated by lines consisting of `---`.
    pub fn from_text(text: &str) -> Self {
        let mut responses = Vec::new();
        let mut cur = String::new();
        for line in text.lines() {
            if line.trim_end() == "---" {
                responses.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(line);
                cur.push('\n');
            }
        }
        if !cur.trim().is_empty() {
            responses.push(cur);
        }
        Self::new(responses)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }
}

impl LlmClient for FixtureClient {
    fn complete(&mut self, _messages: &[Message]) -> Result<String> {
        self.calls += 1;
        self.responses
            .pop_front()
            .ok_or_else(|| Error::Transport(format!("fixture exhausted after {} responses", self.calls - 1)))
    }
}

/// Chat-completion endpoint over HTTPS.
#[derive(Clone, Debug)]
pub struct HttpClient {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpClient {
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL).map_err(|_| Error::Config(format!("{ENV_URL} is not set")))?;
        Ok(Self {
            url,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into()),
            api_key: std::env::var(ENV_API_KEY).ok(),
            timeout: Duration::from_secs(120),
        })
    }
}

impl LlmClient for HttpClient {
    fn complete(&mut self, messages: &[Message]) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": messages
                .iter()
                .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
        });
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(&body).map_err(|e| Error::Transport(e.to_string()))?;
        let value: serde_json::Value = resp.into_body().read_json().map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

/// Contents of the first fenced block, or the whole reply without one.
pub fn extract_script(reply: &str) -> String {
    let Some(start) = reply.find("```") else {
        return reply.trim().to_string();
    };
    let after = &reply[start + 3..];
    // Skip an info string such as ```text.
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    match body.find("```") {
        Some(end) => body[..end].trim().to_string(),
        None => body.trim().to_string(),
    }
}

/// Trajectories every candidate program is executed on before acceptance.
#[derive(Clone)]
pub struct Probe {
    pub inputs: Vec<GuideInput>,
    pub goal: Vec<f64>,
    pub dynamics: Option<Arc<DynamicsModel>>,
}

#[derive(Clone)]
pub struct GenerateOptions {
    pub max_rounds: usize,
    /// Ask for a plain-language plan before the script.
    pub two_stage: bool,
    pub probe: Option<Probe>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            two_stage: false,
            probe: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub program: Program,
    pub source: String,
    /// Script attempts used, counting the accepted one.
    pub rounds: usize,
    pub transcript: Vec<Message>,
}

const SYSTEM: &str = "You are an expert in robot manipulation and write guidance scripts in the requested language.";
const PLAN_REQUEST: &str = "Before writing any script, list the energy terms you will use, their phase and their purpose, in plain words.";
const SCRIPT_REQUEST: &str = "Now write the guidance script.";

fn probe_program(program: &Program, probe: &Probe) -> Result<()> {
    for x in &probe.inputs {
        let (v, _) = program.eval_grad(EvalInput::new(x, &probe.goal, probe.dynamics.as_deref()))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("guidance script energy"));
        }
    }
    Ok(())
}

/// Query, compile, execute on the probe, and feed any error back, for at
/// most `max_rounds` script attempts.
pub fn generate_guidance(bundle: &PromptBundle, client: &mut dyn LlmClient, ctx: &DslContext, opts: &GenerateOptions) -> Result<Generated> {
    if opts.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    let mut messages = vec![Message::new(Role::System, SYSTEM)];
    if opts.two_stage {
        messages.push(Message::new(Role::User, format!("{}\n{PLAN_REQUEST}", bundle.text)));
        let plan = client.complete(&messages)?;
        messages.push(Message::new(Role::Assistant, plan));
        messages.push(Message::new(Role::User, SCRIPT_REQUEST));
    } else {
        messages.push(Message::new(Role::User, bundle.text.clone()));
    }
    let mut diagnostics = Vec::new();
    for round in 1..=opts.max_rounds {
        let reply = client.complete(&messages)?;
        let source = extract_script(&reply);
        messages.push(Message::new(Role::Assistant, reply));
        let outcome = compile(&source, ctx).map_err(Error::from).and_then(|p| {
            if p.terms.is_empty() {
                return Err(Error::Config("script defines no terms".into()));
            }
            if let Some(probe) = &opts.probe {
                probe_program(&p, probe)?;
            }
            Ok(p)
        });
        match outcome {
            Ok(program) => {
                return Ok(Generated {
                    program,
                    source,
                    rounds: round,
                    transcript: messages,
                })
            }
            Err(e) => {
                let diag = e.to_string();
                log::info!("guidance round {round} rejected: {diag}");
                messages.push(Message::new(
                    Role::User,
                    format!("The script failed:\n{diag}\nReturn the complete corrected script."),
                ));
                diagnostics.push(diag);
            }
        }
    }
    Err(Error::Exhausted { diagnostics })
}

#[cfg(test)]
mod tests {
    use super::super::prompt::render_prompt;
    use super::*;
    use crate::envs::EnvId;

    fn door_ctx() -> DslContext {
        DslContext::for_env(&EnvId::Door1D.spec())
    }

    #[test]
    fn fixture_split_on_separator_lines() {
        let f = FixtureClient::from_text("a: 1\n---\nb: 2\nc: 3\n---\n");
        assert_eq!(f.responses.len(), 2);
        assert_eq!(f.responses[1], "b: 2\nc: 3\n");
    }

    #[test]
    fn code_fence_extraction() {
        assert_eq!(extract_script("Sure:\n```text\na: 1\n```\nDone"), "a: 1");
        assert_eq!(extract_script("a: 2"), "a: 2");
        assert_eq!(extract_script("```\nb: 3"), "b: 3");
    }

    #[test]
    fn happy_path_single_round() {
        let b = render_prompt("door1d", "open to 30 degrees", None).unwrap();
        let mut c = FixtureClient::from_text("goal: sqnorm(obs[H-1, 3] - goal[0])\n");
        let g = generate_guidance(&b, &mut c, &door_ctx(), &GenerateOptions::default()).unwrap();
        assert_eq!(g.rounds, 1);
        assert_eq!(c.calls, 1);
    }

    #[test]
    fn repair_after_syntax_error() {
        let b = render_prompt("door1d", "open", None).unwrap();
        let mut c = FixtureClient::from_text("goal: sqnorm(obs[H-1, 3] - goal[0]\n---\n```\ngoal: sqnorm(obs[H-1, 3] - goal[0])\n```\n");
        let g = generate_guidance(&b, &mut c, &door_ctx(), &GenerateOptions::default()).unwrap();
        assert_eq!(g.rounds, 2);
        let feedback = &g.transcript[g.transcript.len() - 2];
        assert_eq!(feedback.role, Role::User);
        assert!(feedback.content.contains("parse error"));
    }

    #[test]
    fn exhaustion_carries_every_diagnostic() {
        let b = render_prompt("door1d", "open", None).unwrap();
        let mut c = FixtureClient::from_text("a: (\n---\nb: obs[0, 99]\n---\nc: t\n---\nd: 1\n");
        let opts = GenerateOptions {
            max_rounds: 3,
            ..Default::default()
        };
        match generate_guidance(&b, &mut c, &door_ctx(), &opts) {
            Err(Error::Exhausted { diagnostics }) => {
                assert_eq!(diagnostics.len(), 3);
                assert!(diagnostics[1].contains("99"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.calls, 3);
    }

    #[test]
    fn two_stage_consumes_plan_first() {
        let b = render_prompt("door1d", "open", None).unwrap();
        let mut c = FixtureClient::from_text("I will use a goal term.\n---\ngoal: sqnorm(obs[H-1, 3] - goal[0])\n");
        let opts = GenerateOptions {
            two_stage: true,
            ..Default::default()
        };
        let g = generate_guidance(&b, &mut c, &door_ctx(), &opts).unwrap();
        assert_eq!((g.rounds, c.calls), (1, 2));
    }

    #[test]
    fn probe_failure_is_fed_back() {
        let spec = EnvId::Door1D.spec();
        let norm = crate::data::Normalizer::identity(spec.obs_dim, spec.act_dim);
        let x = GuideInput::from_normalized(crate::diffcore::Array2::zeros(4, 7), &norm);
        let probe = Probe {
            inputs: vec![x],
            goal: vec![0.5],
            dynamics: None,
        };
        let b = render_prompt("door1d", "open", None).unwrap();
        let mut c = FixtureClient::from_text("g: obs[0, 0] / obs[0, 1]\n---\ng: obs[0, 0]\n");
        let opts = GenerateOptions {
            probe: Some(probe),
            ..Default::default()
        };
        let g = generate_guidance(&b, &mut c, &door_ctx(), &opts).unwrap();
        assert_eq!(g.rounds, 2);
    }

    #[test]
    fn transport_error_from_empty_fixture() {
        let b = render_prompt("door1d", "open", None).unwrap();
        let mut c = FixtureClient::new(vec![]);
        assert!(matches!(
            generate_guidance(&b, &mut c, &door_ctx(), &GenerateOptions::default()),
            Err(Error::Transport(_))
        ));
    }
}
