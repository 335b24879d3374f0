"""Domain-knowledge extraction from a chat backend.

Two query strategies: class-wise (one exchange per class, domains tailored to
it) and dataset-wise (one exchange naming every class, one shared domain
list). Both instruct the model to answer with a JSON array; a list-shaped
fallback parser absorbs models that answer with numbered or bulleted lines.
A deterministic mock backend drawn from a committed vocabulary keeps the
whole pipeline hermetic for tests and desk experiments.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import requests

from .errors import (
    BackendError,
    DomainShortfallError,
    ParseError,
    ValidationError,
)
from .streams import StreamLabel, as_path, derive_seed

PROMPT_TEMPLATE = "An image of {class_name} in the domain of {domain_name}"
CLASS_TEMPLATE = "An image of {class_name}"
TEMPLATE_DOMAIN = "class-template"

DOMAIN_SYSTEM_PROMPT = (
    "[Role] You are a careful visual-domain researcher with broad knowledge of the "
    "environments, media, and artistic styles in which object categories appear.\n"
    "[Task Description] Given one or more classes from the task '{task_name}', think step "
    "by step about where instances of them would realistically be found or depicted, then "
    "answer with the most plausible and reasonable domains for them. Respond with a JSON "
    "array of domain names only, no commentary."
)

PROMPT_SYSTEM_PROMPT = (
    "[Role] You are a prompt engineer for a text-to-image diffusion model.\n"
    "[Task Description] Given a class and a visual domain, write vivid, concrete, "
    "diffusion-style prompts that depict the class inside that domain. Vary composition, "
    "lighting, and rendering detail between prompts. Respond with a JSON array of prompt "
    "strings only, no commentary."
)


@dataclass(frozen=True)
class ClassDef:
    name: str
    definition: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValidationError("class name must be non-empty")


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    classes: tuple[ClassDef, ...]
    domains_requested: int = 8
    prompts_per_domain: int = 8

    def __post_init__(self):
        if not self.classes:
            raise ValidationError("task needs at least one class")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValidationError("class names must be unique")
        if self.domains_requested < 1 or self.prompts_per_domain < 1:
            raise ValidationError("domains_requested and prompts_per_domain must be >= 1")
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)


@dataclass(frozen=True)
class ChatExchange:
    system_prompt: str
    user_prompt: str
    response_text: str
    backend_id: str
    temperature: float
    request_seed: int | None = None

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValidationError("prompts must be non-empty")


@dataclass(frozen=True)
class DomainKnowledge:
    """Per-class domain lists plus the raw exchanges that produced them."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]
    strategy: str
    provenance: tuple[ChatExchange, ...]

    def __post_init__(self):
        for _, domains in self.entries:
            if any(not d for d in domains):
                raise ValidationError("domain names must be non-empty")
            lowered = [d.casefold() for d in domains]
            if len(set(lowered)) != len(lowered):
                raise ValidationError("domains must be deduplicated per class")

    def domains_for(self, class_name: str) -> tuple[str, ...]:
        for name, domains in self.entries:
            if name == class_name:
                return domains
        raise KeyError(class_name)

    def as_dict(self) -> dict[str, list[str]]:
        return {name: list(domains) for name, domains in self.entries}


@dataclass(frozen=True)
class PromptItem:
    class_name: str
    domain: str
    prompt_text: str
    mode: str  # "template" | "llm"

    def __post_init__(self):
        if self.mode == "template":
            expected = PROMPT_TEMPLATE.format(
                class_name=self.class_name, domain_name=self.domain
            )
            if self.prompt_text != expected:
                raise ValidationError("template prompt text must match the canonical template")


@dataclass(frozen=True)
class PromptSet:
    task_name: str
    mode: str
    items: tuple[PromptItem, ...]
    provenance: tuple[ChatExchange, ...]


def render_template_prompt(class_name: str, domain_name: str) -> str:
    """The canonical template prompt, exactly."""
    if not class_name or not domain_name:
        raise ValidationError("class and domain names must be non-empty")
    return PROMPT_TEMPLATE.format(class_name=class_name, domain_name=domain_name)


_LIST_LINE = re.compile(r"^\s*(?:\d+\s*[.)!:]\s*|[-*•]\s+)(.+?)\s*$")


def _find_json_array(text: str) -> list[str] | None:
    decoder = json.JSONDecoder()
    for start in range(len(text)):
        if text[start] != "[":
            continue
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            continue
        if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
            return value
    return None


def parse_domain_response(text: str) -> list[str]:
    """Parse a list-of-names response: JSON array first, then numbered/bulleted lines."""
    array = _find_json_array(text)
    if array is not None:
        items = [v.strip() for v in array if v.strip()]
        if items:
            return items
    items = []
    for line in text.splitlines():
        match = _LIST_LINE.match(line)
        if match:
            items.append(match.group(1).strip())
    if items:
        return items
    raise ParseError("response contains neither a JSON array nor a list", raw=text)


class ChatBackend(Protocol):
    backend_id: str
    default_temperature: float

    def complete(
        self, system_prompt: str, user_prompt: str, *, temperature: float, request_seed: int | None
    ) -> str: ...


# Committed fixture vocabulary for the hermetic mock backend.
MOCK_DOMAIN_VOCAB = (
    "cityscapes", "underwater scene", "snowfield", "cartoon", "oil painting",
    "watercolor sketch", "origami paper craft", "fairytale illustration",
    "desert dunes", "rainforest", "neon night market", "medieval tapestry",
    "charcoal drawing", "stained glass", "claymation still", "vintage photograph",
    "blueprint schematic", "pixel art", "autumn forest", "foggy harbor",
    "alpine meadow", "space station interior", "ukiyo-e woodblock print",
    "graffiti mural", "porcelain figurine", "ice cave", "savanna grassland",
    "paper cutout collage", "infrared photograph", "misty mountain pass",
    "retro comic panel", "mosaic tilework", "low-poly render", "sandstone canyon",
    "thunderstorm coastline", "botanical garden", "abandoned factory",
    "candlelit library", "chalkboard sketch", "bamboo grove", "arctic tundra",
    "carnival at dusk", "embroidered fabric", "crystal cavern", "volcanic plain",
    "rain-soaked street", "marble statue hall", "sunflower field",
)

_MOCK_STYLES = (
    "a cinematic photo", "a soft watercolor", "an ink sketch", "a macro shot",
    "a wide-angle view", "a studio portrait", "a long-exposure capture",
    "an isometric render", "a pastel illustration", "a high-contrast photo",
    "a telephoto frame", "a hand-drawn study",
)

_MOCK_DETAILS = (
    "golden hour light", "heavy fog", "sharp focus", "muted colors",
    "dramatic shadows", "shallow depth of field", "bright daylight",
    "rim lighting", "grainy film texture", "vivid saturation",
)

_RE_COUNT = re.compile(r"exactly (\d+)")
_RE_CLASSWISE = re.compile(r"Class: (.+?) \(")
_RE_DATASET = re.compile(r"Classes: (.+?)\. Provide")
_RE_PROMPT_REQ = re.compile(r"Class: (.+?)\. Domain: (.+?)\. Write exactly (\d+)")


class MockChatBackend:
    """Deterministic stand-in for a chat-completion service.

    Domain names come from the committed vocabulary via a seeded hash of
    (class token, position, request seed); prompt synthesis concatenates the
    class, the domain, and seeded style tokens. Pure function of the request.
    """

    backend_id = "mock-chat"
    default_temperature = 0.0

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _pick_domains(self, class_token: str, count: int, request_seed: int) -> list[str]:
        names: list[str] = []
        taken: set[int] = set()
        for i in range(count):
            idx = derive_seed(request_seed, "mock-domain", class_token, i) % len(MOCK_DOMAIN_VOCAB)
            while idx in taken:
                idx = (idx + 1) % len(MOCK_DOMAIN_VOCAB)
            taken.add(idx)
            names.append(MOCK_DOMAIN_VOCAB[idx])
        return names

    def _pick_prompts(self, class_name: str, domain: str, count: int, request_seed: int) -> list[str]:
        base = derive_seed(request_seed, "mock-prompt", class_name, domain)
        prompts = []
        for i in range(count):
            style = _MOCK_STYLES[(base + 7 * i) % len(_MOCK_STYLES)]
            detail = _MOCK_DETAILS[(base // 13 + 11 * i) % len(_MOCK_DETAILS)]
            prompts.append(f"{style} of a {class_name} in {domain}, {detail}")
        return prompts

    def complete(
        self,
        system_prompt: str,
        user_prompt: str,
        *,
        temperature: float,
        request_seed: int | None,
    ) -> str:
        seed = self.seed if request_seed is None else request_seed
        prompt_req = _RE_PROMPT_REQ.search(user_prompt)
        if prompt_req:
            class_name, domain, count = prompt_req.groups()
            return json.dumps(self._pick_prompts(class_name, domain, int(count), seed))
        count_match = _RE_COUNT.search(user_prompt)
        if not count_match:
            raise BackendError(f"mock backend cannot interpret request: {user_prompt!r}")
        count = int(count_match.group(1))
        dataset_match = _RE_DATASET.search(user_prompt)
        class_match = _RE_CLASSWISE.search(user_prompt)
        token = dataset_match.group(1) if dataset_match else (
            class_match.group(1) if class_match else "task"
        )
        return json.dumps(self._pick_domains(token, count, seed))


class HttpChatBackend:
    """Chat-completion client over HTTP.

    POSTs {model, messages, temperature, seed?} and reads the response text at
    a configurable JSON path (default: first choice's message content).
    Retries transport failures and 5xx with capped exponential backoff.
    """

    default_temperature = 0.7

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        token: str | None = None,
        response_path: str = "choices.0.message.content",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_backoff: float = 8.0,
        session: requests.Session | None = None,
    ):
        if not endpoint:
            raise ValidationError("http chat backend needs an endpoint")
        self.endpoint = endpoint
        self.model = model
        self.token = token
        self.response_path = tuple(response_path.split("."))
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.session = session or requests.Session()
        self.backend_id = f"http-chat:{model}"

    def _extract(self, payload) -> str:
        node = payload
        for part in self.response_path:
            try:
                node = node[int(part)] if part.isdigit() else node[part]
            except (KeyError, IndexError, TypeError):
                raise BackendError(
                    f"response has no field at path {'.'.join(self.response_path)}"
                ) from None
        if not isinstance(node, str):
            raise BackendError("response text field is not a string")
        return node

    def complete(
        self,
        system_prompt: str,
        user_prompt: str,
        *,
        temperature: float,
        request_seed: int | None,
    ) -> str:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "temperature": temperature,
        }
        if request_seed is not None:
            body["seed"] = request_seed
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        delay = self.backoff
        last_error = "no attempt made"
        for _ in range(self.max_retries + 1):
            try:
                response = self.session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if response.status_code < 500:
                    if response.status_code != 200:
                        raise BackendError(
                            f"chat backend returned {response.status_code}: {response.text[:200]}"
                        )
                    return self._extract(response.json())
                last_error = f"server error {response.status_code}"
            time.sleep(delay)
            delay = min(delay * 2.0, self.max_backoff)
        raise BackendError(f"chat backend failed after retries: {last_error}")


def _classwise_user_prompt(task: TaskSpec, class_def: ClassDef, n: int) -> str:
    definition = class_def.definition or class_def.name
    return (
        f"Task: {task.task_name}. Class: {class_def.name} ({definition}). "
        f"Provide exactly {n} domains as a JSON array of strings."
    )


def _dataset_user_prompt(task: TaskSpec, n: int) -> str:
    listed = "; ".join(
        f"{c.name} ({c.definition or c.name})" for c in task.classes
    )
    return (
        f"Task: {task.task_name}. Classes: {listed}. "
        f"Provide exactly {n} domains as a JSON array of strings."
    )


def _prompt_user_prompt(class_name: str, domain: str, k: int) -> str:
    return (
        f"Class: {class_name}. Domain: {domain}. Write exactly {k} distinct prompts "
        f"for a text-to-image model as a JSON array of strings."
    )


def _collect_names(
    backend: ChatBackend,
    system_prompt: str,
    user_prompt: str,
    n: int,
    *,
    temperature: float,
    seed: int,
    path: tuple,
    retry_limit: int,
    what: str,
) -> tuple[list[str], list[ChatExchange]]:
    """Query, dedup case-insensitively, and re-query until n names or shortfall."""
    names: list[str] = []
    seen: set[str] = set()
    exchanges: list[ChatExchange] = []
    for attempt in range(retry_limit + 1):
        request_seed = derive_seed(seed, *path, attempt)
        try:
            text = backend.complete(
                system_prompt, user_prompt, temperature=temperature, request_seed=request_seed
            )
        except BackendError as exc:
            if attempt == retry_limit:
                raise DomainShortfallError(
                    f"backend failed while collecting {what}: {exc}", stage=what
                ) from exc
            continue
        exchanges.append(
            ChatExchange(
                system_prompt=system_prompt,
                user_prompt=user_prompt,
                response_text=text,
                backend_id=backend.backend_id,
                temperature=temperature,
                request_seed=request_seed,
            )
        )
        for name in parse_domain_response(text):
            key = name.casefold()
            if key not in seen:
                seen.add(key)
                names.append(name)
        if len(names) >= n:
            return names[:n], exchanges
    raise DomainShortfallError(
        f"collected only {len(names)} of {n} unique {what} after {retry_limit + 1} attempts",
        stage=what,
        completed=len(names),
    )


def extrapolate_class_wise(
    task: TaskSpec,
    backend: ChatBackend,
    *,
    seed: int = 0,
    stream_label: StreamLabel = 0,
    temperature: float | None = None,
    retry_limit: int = 3,
    max_workers: int = 1,
) -> DomainKnowledge:
    """One exchange per class; per-class domain lists of length n."""
    temp = backend.default_temperature if temperature is None else temperature
    system_prompt = DOMAIN_SYSTEM_PROMPT.format(task_name=task.task_name)
    path = as_path(stream_label)
    n = task.domains_requested

    def worker(class_def: ClassDef) -> tuple[list[str], list[ChatExchange]]:
        return _collect_names(
            backend,
            system_prompt,
            _classwise_user_prompt(task, class_def, n),
            n,
            temperature=temp,
            seed=seed,
            path=("extrapolate", *path, class_def.name),
            retry_limit=retry_limit,
            what=f"domains for class {class_def.name!r}",
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(worker, task.classes))
    else:
        results = [worker(c) for c in task.classes]
    entries = []
    provenance: list[ChatExchange] = []
    for class_def, (names, exchanges) in zip(task.classes, results):
        entries.append((class_def.name, tuple(names)))
        provenance.extend(exchanges)
    return DomainKnowledge(
        entries=tuple(entries), strategy="class-wise", provenance=tuple(provenance)
    )


def extrapolate_dataset_wise(
    task: TaskSpec,
    backend: ChatBackend,
    *,
    seed: int = 0,
    stream_label: StreamLabel = 0,
    temperature: float | None = None,
    retry_limit: int = 3,
) -> DomainKnowledge:
    """One exchange naming every class; the same domain list for all classes."""
    temp = backend.default_temperature if temperature is None else temperature
    system_prompt = DOMAIN_SYSTEM_PROMPT.format(task_name=task.task_name)
    names, exchanges = _collect_names(
        backend,
        system_prompt,
        _dataset_user_prompt(task, task.domains_requested),
        task.domains_requested,
        temperature=temp,
        seed=seed,
        path=("extrapolate-dataset", *as_path(stream_label)),
        retry_limit=retry_limit,
        what="shared domains",
    )
    shared = tuple(names)
    entries = tuple((c.name, shared) for c in task.classes)
    return DomainKnowledge(entries=entries, strategy="dataset-wise", provenance=tuple(exchanges))


def generate_llm_prompts(
    class_name: str,
    domain: str,
    k: int,
    backend: ChatBackend,
    *,
    seed: int = 0,
    stream_label: StreamLabel = 0,
    temperature: float | None = None,
    retry_limit: int = 3,
) -> tuple[list[str], list[ChatExchange]]:
    """k distinct diffusion-style prompts for one (class, domain) pair."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    temp = backend.default_temperature if temperature is None else temperature
    return _collect_names(
        backend,
        PROMPT_SYSTEM_PROMPT,
        _prompt_user_prompt(class_name, domain, k),
        k,
        temperature=temp,
        seed=seed,
        path=("prompts", *as_path(stream_label), class_name, domain),
        retry_limit=retry_limit,
        what=f"prompts for ({class_name!r}, {domain!r})",
    )


def build_prompt_set(
    task: TaskSpec,
    knowledge: DomainKnowledge,
    mode: str,
    backend: ChatBackend | None = None,
    *,
    seed: int = 0,
    stream_label: StreamLabel = 0,
    temperature: float | None = None,
    retry_limit: int = 3,
) -> PromptSet:
    """Expand domain knowledge into generation prompts.

    template mode emits the canonical template once per (class, domain); llm
    mode asks the backend for prompts_per_domain distinct prompts per pair.
    """
    items: list[PromptItem] = []
    provenance: list[ChatExchange] = []
    if mode == "template":
        for class_name, domains in knowledge.entries:
            for domain in domains:
                items.append(
                    PromptItem(
                        class_name=class_name,
                        domain=domain,
                        prompt_text=render_template_prompt(class_name, domain),
                        mode="template",
                    )
                )
    elif mode == "llm":
        if backend is None:
            raise ValidationError("llm prompt mode requires a backend")
        for class_name, domains in knowledge.entries:
            for domain in domains:
                prompts, exchanges = generate_llm_prompts(
                    class_name,
                    domain,
                    task.prompts_per_domain,
                    backend,
                    seed=seed,
                    stream_label=stream_label,
                    temperature=temperature,
                    retry_limit=retry_limit,
                )
                provenance.extend(exchanges)
                for text in prompts:
                    items.append(
                        PromptItem(
                            class_name=class_name, domain=domain, prompt_text=text, mode="llm"
                        )
                    )
    else:
        raise ValidationError(f"unknown prompt mode {mode!r}")
    return PromptSet(
        task_name=task.task_name, mode=mode, items=tuple(items), provenance=tuple(provenance)
    )


def _exchange_to_dict(exchange: ChatExchange) -> dict:
    return {
        "system_prompt": exchange.system_prompt,
        "user_prompt": exchange.user_prompt,
        "response_text": exchange.response_text,
        "backend_id": exchange.backend_id,
        "temperature": exchange.temperature,
        "request_seed": exchange.request_seed,
    }


def _exchange_from_dict(data: dict) -> ChatExchange:
    return ChatExchange(**data)


def knowledge_to_json(
    knowledge: DomainKnowledge, *, task_name: str = "", config_digest: str = ""
) -> str:
    payload = {
        "task_name": task_name,
        "config_digest": config_digest,
        "strategy": knowledge.strategy,
        "entries": knowledge.as_dict(),
        "provenance": [_exchange_to_dict(e) for e in knowledge.provenance],
    }
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def knowledge_from_json(text: str) -> DomainKnowledge:
    payload = json.loads(text)
    entries = tuple(
        (name, tuple(domains)) for name, domains in payload["entries"].items()
    )
    return DomainKnowledge(
        entries=entries,
        strategy=payload["strategy"],
        provenance=tuple(_exchange_from_dict(e) for e in payload["provenance"]),
    )


def prompt_set_to_json(prompt_set: PromptSet, *, config_digest: str = "") -> str:
    payload = {
        "task_name": prompt_set.task_name,
        "config_digest": config_digest,
        "mode": prompt_set.mode,
        "items": [
            {
                "class": item.class_name,
                "domain": item.domain,
                "prompt_text": item.prompt_text,
                "mode": item.mode,
            }
            for item in prompt_set.items
        ],
        "provenance": [_exchange_to_dict(e) for e in prompt_set.provenance],
    }
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def prompt_set_from_json(text: str) -> PromptSet:
    payload = json.loads(text)
    items = tuple(
        PromptItem(
            class_name=i["class"],
            domain=i["domain"],
            prompt_text=i["prompt_text"],
            mode=i["mode"],
        )
        for i in payload["items"]
    )
    return PromptSet(
        task_name=payload["task_name"],
        mode=payload["mode"],
        items=items,
        provenance=tuple(_exchange_from_dict(e) for e in payload["provenance"]),
    )


def exchanges_summary(provenance: Sequence[ChatExchange]) -> dict:
    return {
        "exchange_count": len(provenance),
        "backends": sorted({e.backend_id for e in provenance}),
    }
