"""Vulnerability-specific detection prompts.

Each template carries five blocks rendered in a fixed order: definition,
typical characteristics, the code under analysis, analysis instructions,
a four-step reasoning scaffold, and the answer format. The answer format
demands a machine-parseable final line ("VERDICT: VULNERABLE" or
"VERDICT: SECURE") so downstream parsing is deterministic.

Templates can be overridden from a directory of ``<vuln_type>.prompt``
files that use ``{{CODE}}`` as the code slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .corpus import VulnType

CODE_SLOT = "{{CODE}}"
DEFAULT_TOKEN_BUDGET = 2048

COT_STEPS = (
    "Understand the vulnerability's definition and characteristics.",
    "Analyze the structure of the given code: functions, state variables, external interactions, and control flow.",
    "Identify code locations that could exhibit the vulnerability.",
    "Explain the causes of any vulnerability you found, or provide evidence that the code is secure.",
)

ANSWER_FORMAT = (
    "Answer format:\n"
    "First write an explanation section describing your analysis and the "
    "evidence behind your conclusion. Then finish with exactly one final "
    "line of the form:\n"
    "VERDICT: VULNERABLE\n"
    "or\n"
    "VERDICT: SECURE"
)


class CodeTooLong(ValueError):
    def __init__(self, estimated_tokens: int, budget: int):
        super().__init__(
            f"rendered prompt is an estimated {estimated_tokens} tokens, budget is {budget}"
        )
        self.estimated_tokens = estimated_tokens
        self.budget = budget


def estimate_tokens(text: str) -> int:
    """Cheap client-side token estimate (about 4 characters per token)."""
    return -(-len(text) // 4)


def _name_keyword(vuln_type: VulnType) -> str:
    """The word a prompt must contain to count as naming its vulnerability."""
    return {
        VulnType.REENTRANCY: "reentrancy",
        VulnType.TIMESTAMP: "timestamp",
        VulnType.OVERFLOW_UNDERFLOW: "overflow",
        VulnType.DELEGATECALL: "delegatecall",
    }[vuln_type]


@dataclass(frozen=True)
class PromptTemplate:
    """A structured detection prompt, or a raw override with a {{CODE}} slot."""

    vuln_type: VulnType
    definition_block: str = ""
    characteristics_block: str = ""
    instruction_block: str = ""
    cot_steps: tuple[str, ...] = COT_STEPS
    answer_format_block: str = ANSWER_FORMAT
    raw_text: str | None = None

    def __post_init__(self):
        if self.raw_text is not None:
            if self.raw_text.count(CODE_SLOT) != 1:
                raise ValueError(
                    f"template for {self.vuln_type.value} must contain exactly one {CODE_SLOT} slot"
                )
            if _name_keyword(self.vuln_type) not in self.raw_text.lower():
                raise ValueError(
                    f"template for {self.vuln_type.value} never names the vulnerability"
                )
        elif len(self.cot_steps) != 4:
            raise ValueError(f"expected 4 reasoning steps, got {len(self.cot_steps)}")

    def body(self) -> str:
        """The full prompt text with the code slot left in place."""
        if self.raw_text is not None:
            return self.raw_text
        steps = "\n".join(f"{i}. {s}" for i, s in enumerate(self.cot_steps, start=1))
        return (
            f"{self.definition_block}\n\n"
            f"{self.characteristics_block}\n\n"
            f"Code to analyze:\n{CODE_SLOT}\n\n"
            f"{self.instruction_block}\n\n"
            f"Work through the following steps:\n{steps}\n\n"
            f"{self.answer_format_block}"
        )


def render_prompt(
    template: PromptTemplate, source: str, max_input_tokens: int = DEFAULT_TOKEN_BUDGET
) -> str:
    """Substitute ``source`` into the template's single code slot.

    Raises CodeTooLong when the rendered text exceeds the token budget
    under the characters/4 estimate (the serving side enforces the real
    limit; this is a pre-flight check).
    """
    if not source:
        raise ValueError("source must be non-empty")
    rendered = template.body().replace(CODE_SLOT, source)
    estimated = estimate_tokens(rendered)
    if estimated > max_input_tokens:
        raise CodeTooLong(estimated, max_input_tokens)
    return rendered


def builtin_templates() -> dict[VulnType, PromptTemplate]:
    """The four built-in detection templates, one per vulnerability type."""
    return {
        VulnType.REENTRANCY: PromptTemplate(
            vuln_type=VulnType.REENTRANCY,
            definition_block=(
                "You are analyzing Solidity smart-contract code for reentrancy "
                "vulnerabilities. A reentrancy vulnerability occurs when a contract "
                "calls an external contract or sends Ether before completing all "
                "necessary internal state changes. An attacker can repeatedly "
                "re-enter the vulnerable function before the original call finishes, "
                "for example withdrawing funds multiple times."
            ),
            characteristics_block=(
                "Typical characteristics of reentrancy:\n"
                "- An external call (call.value / call{value: ...} / send / transfer to "
                "an arbitrary address) happens before the state update that should "
                "prevent a second withdrawal.\n"
                "- External calls inside loops.\n"
                "- Balance bookkeeping (for example subtracting the withdrawn amount) "
                "only after the external call returns.\n"
                "- Missing access control or missing reentrancy guards around functions "
                "that move funds. Note that modifiers restricting the caller (such as "
                "onlyOwner) can make re-entry by an attacker impossible."
            ),
            instruction_block=(
                "Analyze the code above. Decide whether it contains a reentrancy "
                "vulnerability, point to the problematic lines if so, and explain "
                "the causes, or explain why the code is secure."
            ),
        ),
        VulnType.TIMESTAMP: PromptTemplate(
            vuln_type=VulnType.TIMESTAMP,
            definition_block=(
                "You are analyzing Solidity smart-contract code for timestamp "
                "dependence vulnerabilities. A timestamp dependence vulnerability "
                "occurs when a contract relies on block timestamps for critical "
                "operations. Miners can manipulate block.timestamp within a window, "
                "so timestamp-driven logic can be skewed for profit."
            ),
            characteristics_block=(
                "Typical characteristics of timestamp dependence:\n"
                "- block.timestamp (or now) used for random number generation, "
                "lottery winner selection, or other key decisions.\n"
                "- Ether transfers or state changes gated directly on manipulable "
                "timestamp comparisons.\n"
                "- Timestamps stored and later used in payout or ordering logic.\n"
                "A timestamp used only in a simple comparison that does not affect "
                "state or funds is usually not exploitable."
            ),
            instruction_block=(
                "Analyze the code above. Decide whether it contains a timestamp "
                "dependence vulnerability, point to the problematic lines if so, and "
                "explain the causes, or explain why the code is secure."
            ),
        ),
        VulnType.OVERFLOW_UNDERFLOW: PromptTemplate(
            vuln_type=VulnType.OVERFLOW_UNDERFLOW,
            definition_block=(
                "You are analyzing Solidity smart-contract code for integer "
                "overflow/underflow vulnerabilities. An overflow or underflow occurs "
                "when the result of an arithmetic operation exceeds the storage range "
                "of its type and wraps around: past the maximum it wraps to the "
                "minimum, and below the minimum it wraps to the maximum."
            ),
            characteristics_block=(
                "Typical characteristics of integer overflow/underflow:\n"
                "- Unchecked arithmetic (+, -, *) on uint/int values derived from user "
                "input, especially balances and token amounts.\n"
                "- Wrap-around arithmetic enabling incorrect balances, bypassed "
                "require checks, or out-of-control loops.\n"
                "- Absence of SafeMath (or an equivalent checked-math library) on "
                "compiler versions older than 0.8, or explicit unchecked blocks on "
                "newer ones."
            ),
            instruction_block=(
                "Analyze the code above. Decide whether it contains an integer "
                "overflow or underflow vulnerability, point to the problematic lines "
                "if so, and explain the causes, or explain why the code is secure."
            ),
        ),
        VulnType.DELEGATECALL: PromptTemplate(
            vuln_type=VulnType.DELEGATECALL,
            definition_block=(
                "You are analyzing Solidity smart-contract code for delegatecall "
                "vulnerabilities. delegatecall is a low-level call that loads code "
                "from another contract while executing in the context of the calling "
                "contract, so the callee executes with, and can modify, the caller's "
                "storage."
            ),
            characteristics_block=(
                "Typical characteristics of delegatecall misuse:\n"
                "- delegatecall to an address that users can influence or replace.\n"
                "- Callee contracts whose storage layout does not match the caller's, "
                "letting writes land on critical slots (owner, balances).\n"
                "- delegatecall forwarding raw user-supplied calldata.\n"
                "- Upgradeable proxy patterns with unprotected implementation "
                "setters."
            ),
            instruction_block=(
                "Analyze the code above. Decide whether it contains a delegatecall "
                "vulnerability, point to the problematic lines if so, and explain "
                "the causes, or explain why the code is secure."
            ),
        ),
    }


def load_templates(directory: str | Path) -> dict[VulnType, PromptTemplate]:
    """Load ``<vuln_type>.prompt`` override files from a directory.

    Types without an override file fall back to the built-in template.
    """
    directory = Path(directory)
    templates = builtin_templates()
    for vt in VulnType:
        path = directory / f"{vt.value}.prompt"
        if path.is_file():
            templates[vt] = PromptTemplate(
                vuln_type=vt, raw_text=path.read_text(encoding="utf-8")
            )
    return templates
