use super::parser::GRAMMAR;
use crate::envs::{EnvId, EnvSpec};
use crate::error::Result;

/// The six prompt parts plus the rendered text sent to the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub env: EnvId,
    pub purpose: String,
    pub structure: String,
    pub environment: String,
    pub prototype: String,
    pub instruction: String,
    pub hints: String,
    pub text: String,
}

impl PromptBundle {
    pub fn parts(&self) -> [(&'static str, &str); 6] {
        [
            ("Function Purpose", &self.purpose),
            ("Guidance Structure", &self.structure),
            ("Environment Description", &self.environment),
            ("Function Prototype", &self.prototype),
            ("Task Instruction", &self.instruction),
            ("Hints", &self.hints),
        ]
    }
}

const PURPOSE: &str = "You write guidance energies for a diffusion planner that samples joint hand-object \
trajectories. Each energy is a scalar that is low on trajectories that achieve the task. The planner \
follows the negative gradient of the weighted sum of energies while denoising, so every energy should \
be smooth wherever possible.";

const CONTACT_STRUCTURE: &str = "Guidance is split into two phases, chosen from the planned distance between the \
hand and the object's contact point.\n\
Phase 1 (Pre-Interaction Phase): the hand is farther than the contact threshold. Only terms marked \
`phase = pre` or `phase = both` are active. Use them to bring the hand to the contact point; do not \
touch object coordinates here.\n\
Phase 2 (Interaction Phase): the hand is within the threshold. Terms marked `phase = post` or \
`phase = both` are active. Use them to drive the object to the goal while keeping the motion \
physically consistent.";

const IN_HAND_STRUCTURE: &str = "The object is always held, so a single phase applies: mark every term \
`phase = both`.\n\
Phase 1 (In-Hand Phase): drive the object towards the goal, keep the fingers active enough to move \
it, and keep predicted motion consistent with the learned dynamics.";

fn environment(spec: &EnvSpec) -> String {
    let mut s = String::new();
    let story = match spec.id {
        EnvId::Door1D => {
            "A hand on a line pulls a latched door. It must reach the handle, turn the latch \
past 45 degrees with the grip actuator, then pull; the hinge opens by 2 rad per unit of hand travel \
towards -x and the handle follows the hand."
        }
        EnvId::Hammer1D => {
            "A hand on a line picks up a hammer and strikes a nail head at x = 1. Each strike \
moving +x through the head drives the nail by half the hammer travel, up to 0.09 (full drive)."
        }
        EnvId::Disk => {
            "Three fingers hold a disk. The disk turns by 1.2 times the mean finger motion, \
but only when the mean absolute finger motion exceeds the activity floor. Angles wrap to (-pi, pi]."
        }
    };
    s.push_str(story);
    s.push_str("\nState columns (`obs[time, i]`):");
    for (i, n) in spec.obs_names.iter().enumerate() {
        s.push_str(&format!("\n  {i}: {n} [{}, {}]", spec.obs_low[i], spec.obs_high[i]));
    }
    s.push_str("\nAction columns (`act[time, i]`):");
    for (i, n) in spec.act_names.iter().enumerate() {
        s.push_str(&format!("\n  {i}: {n} (|value| <= {})", spec.action_bounds[i]));
    }
    s.push_str("\nGoal (`goal[k]`):");
    for (k, &i) in spec.goal_idx.iter().enumerate() {
        s.push_str(&format!("\n  {k}: target for {}", spec.obs_names[i]));
    }
    if let Some(c) = spec.contact {
        s.push_str(&format!(
            "\nContact: hand column {} meets object column {} when closer than {}.",
            c.hand, c.target, spec.delta_contact
        ));
    }
    if !spec.wrapped_idx.is_empty() {
        s.push_str("\nWrapped columns (use `wrap` on differences):");
        for &i in &spec.wrapped_idx {
            s.push_str(&format!(" {i}"));
        }
    }
    s
}

fn prototype() -> String {
    format!(
        "Reply with a guidance script only, optionally inside a ``` fence. One term per line:\n\
  name (weight = w, phase = pre|post|both): expression\n\
Sources: obs and act read env units, nobs and nact read normalized units, npred[t, i] is the \
dynamics model's normalized next-state prediction from step t. Inside mean_t(...) and sum_t(...) \
the variable t runs over plan steps and steps whose indices fall outside the plan are skipped. \
H is the plan length. `#` starts a comment.\nGrammar (EBNF):\n{GRAMMAR}"
    )
}

fn default_hints(spec: &EnvSpec) -> String {
    let mut h = vec![
        "Make the first term of your script about 12 in magnitude on typical plans; it is rescaled to that value on load.".to_string(),
        "Give the goal term weight 30 and a dynamics-consistency term weight 1.2.".to_string(),
        "Soft goals work better than final-step goals: compare obs[t, i] with interp(obs[0, i], goal[k], t / H).".to_string(),
    ];
    match spec.contact {
        Some(c) => h.push(format!(
            "Example pre-phase term: align (weight = 12, phase = pre): mean_t(sqnorm(obs[t, {}] - obs[t, {}]))",
            c.hand, c.target
        )),
        None => h.push("Reward finger motion with softplus of the activity floor minus the mean absolute finger change.".to_string()),
    }
    h.join("\n")
}

/// Deterministic prompt for env id `env`.
pub fn render_prompt(env: &str, instruction: &str, hints: Option<&[String]>) -> Result<PromptBundle> {
    let id: EnvId = env.parse()?;
    let spec = id.spec();
    let hints = match hints {
        Some(h) if !h.is_empty() => h.join("\n"),
        _ => default_hints(&spec),
    };
    let instruction = if instruction.trim().is_empty() {
        "Reach the training goal.".to_string()
    } else {
        instruction.trim().to_string()
    };
    let structure = if spec.contact.is_some() { CONTACT_STRUCTURE } else { IN_HAND_STRUCTURE };
    let mut bundle = PromptBundle {
        env: id,
        purpose: PURPOSE.to_string(),
        structure: structure.to_string(),
        environment: environment(&spec),
        prototype: prototype(),
        instruction,
        hints,
        text: String::new(),
    };
    let text: Vec<String> = bundle.parts().iter().map(|(title, body)| format!("## {title}\n{body}\n")).collect();
    bundle.text = text.join("\n");
    Ok(bundle)
}
