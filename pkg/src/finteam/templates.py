"""Versioned prompt templates loaded from ``prompts/{role}.txt`` files.

File layout: leading ``# key: value`` header lines, then sections opened by a
line of the form ``[section]``. Placeholders are ``{name}`` (lowercase
identifiers); JSON examples in a template are left untouched.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

ROLE_FILES = ("document_analyzer", "analyst", "accountant", "consultant", "judge", "datagen", "workflows")

_SECTION_RE = re.compile(r"^\[([a-z_][a-z0-9_.]*)\]\s*$")
PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


class TemplateError(KeyError):
    pass


@dataclass
class Template:
    role: str
    sections: dict[str, str]
    header: dict[str, str]
    sha256: str

    def placeholders(self, section: str) -> set[str]:
        return set(PLACEHOLDER_RE.findall(self.sections[section]))


def parse_template(role: str, text: str) -> Template:
    header: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            current = sections.setdefault(m.group(1), [])
            continue
        if current is None:
            if line.startswith("#") and ":" in line:
                key, _, value = line.lstrip("# ").partition(":")
                header[key.strip()] = value.strip()
            continue
        current.append(line)
    return Template(
        role,
        {name: "\n".join(lines).strip("\n") for name, lines in sections.items()},
        header,
        hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


class PromptLibrary:
    """All role templates; ``directory`` overrides the packaged defaults per file."""

    def __init__(self, directory: str | Path | None = None):
        self.templates: dict[str, Template] = {}
        pkg = resources.files("finteam") / "prompts"
        for role in ROLE_FILES:
            override = Path(directory) / f"{role}.txt" if directory else None
            if override is not None and override.is_file():
                text = override.read_text(encoding="utf-8")
            else:
                text = (pkg / f"{role}.txt").read_text(encoding="utf-8")
            self.templates[role] = parse_template(role, text)

    def hashes(self) -> dict[str, str]:
        return {role: t.sha256 for role, t in sorted(self.templates.items())}

    def section(self, role: str, section: str) -> str:
        try:
            return self.templates[role].sections[section]
        except KeyError:
            raise TemplateError(f"{role}.{section}") from None

    def render(self, role: str, section: str, **values: object) -> str:
        """Fill every placeholder; a missing value is an error, extras are ignored."""
        template = self.section(role, section)

        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in values:
                raise TemplateError(f"{role}.{section} needs a value for {{{name}}}")
            return str(values[name])

        return PLACEHOLDER_RE.sub(sub, template)


_default: PromptLibrary | None = None


def default_library() -> PromptLibrary:
    global _default
    if _default is None:
        _default = PromptLibrary()
    return _default
