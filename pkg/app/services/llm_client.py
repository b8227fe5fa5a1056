"""Chat-completion clients: live OpenAI-compatible HTTP and scripted playback"""

import asyncio
import json as json_module
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import httpx
import yaml
from pydantic import Field, ValidationError

from app.config import settings
from app.exceptions import (
    BudgetExceeded,
    InvalidConfigError,
    JsonExtractionError,
    ParseFailure,
    ScriptExhausted,
    TransportError,
)
from app.models.schemas import (
    BackendKind,
    ChatMessage,
    ChatRequest,
    ChatRole,
    Completion,
    FrozenModel,
    TokenUsage,
)
from app.utils.json_extract import extract_json
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

JSON_REPROMPT = "Return valid JSON only."

RETRYABLE_STATUS = {408, 409, 429}

Responder = Callable[[ChatRequest], Optional[str]]


def whitespace_usage(prompt: str, completion: str) -> TokenUsage:
    """Synthetic usage: whitespace-separated token counts."""
    return TokenUsage(prompt_tokens=len(prompt.split()), completion_tokens=len(completion.split()))


class ModelClient(ABC):
    """Common interface and usage accounting for both backends"""

    backend: BackendKind

    def __init__(self):
        self._usage = TokenUsage.zero()
        self._budget: Optional[int] = None
        self._refused = False
        self.call_count = 0

    @abstractmethod
    async def complete(self, request: ChatRequest) -> Completion:
        """Return one completion for the request."""

    def usage_report(self) -> TokenUsage:
        """Usage summed over completed calls since construction or last reset."""
        return self._usage

    def reset_usage(self) -> None:
        self._usage = TokenUsage.zero()
        self.call_count = 0

    def arm_budget(self, tokens: Optional[int]) -> None:
        """Cap total usage at `tokens`; None disarms the cap."""
        if tokens is not None and tokens < 1:
            raise InvalidConfigError("token budget must be positive")
        self._budget = tokens
        self._refused = False

    @property
    def budget(self) -> Optional[int]:
        return self._budget

    @property
    def budget_exhausted(self) -> bool:
        """True once usage reached the armed budget or a call was refused under it."""
        if self._budget is None:
            return False
        return self._refused or self._usage.total >= self._budget

    def _refuse(self, message: str) -> BudgetExceeded:
        self._refused = True
        logger.warning("Refusing model call: %s", message)
        return BudgetExceeded(message)

    def _record(self, usage: TokenUsage) -> None:
        # No await between read and write, so this is atomic under asyncio
        self._usage = self._usage + usage
        self.call_count += 1


class LiveModelClient(ModelClient):
    """Async client for an OpenAI-compatible /chat/completions endpoint"""

    backend = BackendKind.LIVE

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        timeout: Optional[float] = None,
        max_retries: Optional[int] = None,
        backoff_seconds: Optional[float] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        super().__init__()
        self.base_url = (base_url or settings.llm_base_url).rstrip("/")
        self.api_key = api_key if api_key is not None else settings.llm_api_key
        self.timeout = timeout if timeout is not None else settings.llm_timeout
        self.max_retries = max_retries if max_retries is not None else settings.llm_max_retries
        self.backoff_seconds = (
            backoff_seconds if backoff_seconds is not None else settings.llm_backoff_seconds
        )
        self.verify_ssl = settings.ssl_verify
        self._transport = transport

    def _get_headers(self) -> dict[str, str]:
        """Get standard headers for API requests"""
        return {
            "Authorization": f"Bearer {self.api_key}",
            "Content-Type": "application/json",
            "User-Agent": f"{settings.app_name}/{settings.app_version}",
        }

    @staticmethod
    def _payload(request: ChatRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": str(m.role), "content": m.content} for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            payload["max_tokens"] = request.max_output_tokens
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    @staticmethod
    def _parse_body(body: dict[str, Any], request: ChatRequest) -> tuple[str, TokenUsage]:
        text = body["choices"][0]["message"]["content"] or ""
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage or "completion_tokens" in usage:
            return text, TokenUsage(
                prompt_tokens=usage.get("prompt_tokens", 0),
                completion_tokens=usage.get("completion_tokens", 0),
            )
        return text, whitespace_usage(request.prompt_text, text)

    async def complete(self, request: ChatRequest) -> Completion:
        """
        Send a chat-completion request, retrying transient failures.

        Timeouts, connection errors, 408/409/429 and 5xx responses are
        retried with exponential backoff; other 4xx responses fail at once.

        Args:
            request: Chat request to send

        Returns:
            Completion with the reported usage

        Raises:
            BudgetExceeded: If an armed token budget is already used up
            TransportError: If the endpoint fails after all retries
        """
        if self.budget_exhausted:
            raise self._refuse(f"Token budget {self._budget} reached ({self._usage.total} used)")

        url = f"{self.base_url}/chat/completions"
        payload = self._payload(request)

        # Log request details
        logger.info("=" * 80)
        logger.info("LLM REQUEST")
        logger.info("URL: %s", url)
        logger.info("Model: %s, messages: %d, temperature: %s",
                    request.model_id, len(request.messages), request.temperature)
        logger.info("Authorization: Bearer ***")
        logger.info("=" * 80)

        last_error: Optional[Exception] = None
        attempts = self.max_retries + 1
        for attempt in range(attempts):
            try:
                async with httpx.AsyncClient(
                    headers=self._get_headers(),
                    timeout=self.timeout,
                    verify=self.verify_ssl,
                    transport=self._transport,
                ) as client:
                    response = await client.post(url, json=payload)

                logger.info("LLM RESPONSE status %s (attempt %d/%d)",
                            response.status_code, attempt + 1, attempts)

                if response.status_code in RETRYABLE_STATUS or response.status_code >= 500:
                    last_error = httpx.HTTPStatusError(
                        f"HTTP {response.status_code}", request=response.request, response=response
                    )
                elif response.status_code >= 400:
                    error = TransportError(
                        f"HTTP {response.status_code} from {url}: {response.text[:500]}"
                    )
                    logger.error("LLM request rejected for %s: status %s", url, response.status_code)
                    capture_exception_with_context(error, stage="gateway", backend="live")
                    raise error
                else:
                    text, usage = self._parse_body(response.json(), request)
                    self._record(usage)
                    logger.info("Usage: prompt=%d completion=%d",
                                usage.prompt_tokens, usage.completion_tokens)
                    return Completion(text=text, usage=usage, backend=self.backend)
            except httpx.TimeoutException as e:
                logger.warning("LLM request timeout for %s: %s", url, e)
                last_error = e
            except httpx.RequestError as e:
                logger.warning("LLM request error for %s: %s", url, e)
                last_error = e
            except (KeyError, IndexError, TypeError, ValueError) as e:
                error = TransportError(f"Malformed completion body from {url}: {e}")
                logger.error("LLM response malformed for %s: %s", url, e)
                capture_exception_with_context(error, stage="gateway", backend="live")
                raise error from e

            if attempt < attempts - 1:
                wait = self.backoff_seconds * (2 ** attempt)
                logger.warning("Retrying in %.2fs (%s)", wait, last_error)
                await asyncio.sleep(wait)

        error = TransportError(f"Chat completion failed after {attempts} attempts: {last_error}")
        logger.error("LLM request failed for %s: %s", url, last_error)
        capture_exception_with_context(error, stage="gateway", backend="live")
        raise error from last_error


class ScriptRule(FrozenModel):
    """Responses returned when the prompt contains `match`"""
    match: str = Field(..., min_length=1)
    responses: tuple[str, ...] = Field(..., min_length=1)
    repeat: bool = Field(False, description="Keep returning the last response once played out")


class ScriptedModelClient(ModelClient):
    """
    Deterministic playback backend.

    Each call is answered by the first keyed rule whose substring occurs in
    the prompt and still has a response, then by the responder callable
    when it returns text, then by the next entry of the ordered script.
    Calls are serialized so playback order is stable under concurrency.
    """

    backend = BackendKind.SCRIPTED

    def __init__(
        self,
        responses: Sequence[str] = (),
        rules: Sequence[Union[ScriptRule, dict]] = (),
        responder: Optional[Responder] = None,
    ):
        super().__init__()
        self._responses = list(responses)
        self._cursor = 0
        self._rules = [r if isinstance(r, ScriptRule) else ScriptRule(**r) for r in rules]
        self._rule_cursors = [0] * len(self._rules)
        self._responder = responder
        self._lock = asyncio.Lock()
        self.requests: list[ChatRequest] = []

    @classmethod
    def from_file(cls, path: Union[str, Path], responder: Optional[Responder] = None) -> "ScriptedModelClient":
        """
        Load a script from YAML or JSON.

        The file holds either a list of responses or a mapping with
        `responses` and `rules` keys.

        Raises:
            InvalidConfigError: If the file is missing or malformed
        """
        path = Path(path)
        if not path.exists():
            raise InvalidConfigError(f"Script file not found: {path}")
        try:
            text = path.read_text(encoding="utf-8")
            data = json_module.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as e:
            raise InvalidConfigError(f"Script file {path} is not readable: {e}") from e

        if isinstance(data, list):
            data = {"responses": data}
        if not isinstance(data, dict):
            raise InvalidConfigError(f"Script file {path} must hold a list or mapping")
        try:
            return cls(
                responses=[str(r) for r in data.get("responses", [])],
                rules=[ScriptRule(**r) for r in data.get("rules", [])],
                responder=responder,
            )
        except (TypeError, ValidationError) as e:
            raise InvalidConfigError(f"Script file {path} has an invalid rule: {e}") from e

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._cursor

    def _select(self, request: ChatRequest) -> tuple[str, Callable[[], None]]:
        """Pick the response without consuming it; the returned callable commits."""
        prompt = request.prompt_text
        for i, rule in enumerate(self._rules):
            if rule.match not in prompt:
                continue
            position = self._rule_cursors[i]
            if position < len(rule.responses):
                def _advance(i=i):
                    self._rule_cursors[i] += 1
                return rule.responses[position], _advance
            if rule.repeat:
                return rule.responses[-1], lambda: None

        if self._responder is not None:
            text = self._responder(request)
            if text is not None:
                return text, lambda: None

        if self._cursor < len(self._responses):
            def _advance_script():
                self._cursor += 1
            return self._responses[self._cursor], _advance_script

        raise ScriptExhausted(f"Script exhausted after {self.call_count} calls")

    async def complete(self, request: ChatRequest) -> Completion:
        """
        Play back the next scripted response.

        Raises:
            ScriptExhausted: If no rule, responder or script entry answers
            BudgetExceeded: If the call's usage would surpass the armed budget
        """
        async with self._lock:
            text, commit = self._select(request)
            usage = whitespace_usage(request.prompt_text, text)
            if self._budget is not None and self._usage.total + usage.total > self._budget:
                raise self._refuse(
                    f"Call needs {usage.total} tokens; budget {self._budget} "
                    f"has {self._budget - self._usage.total} left"
                )
            commit()
            self.requests.append(request)
            self._record(usage)
            return Completion(text=text, usage=usage, backend=self.backend)


async def complete(client: ModelClient, request: ChatRequest) -> Completion:
    """Send one request through any backend."""
    return await client.complete(request)


def usage_report(client: ModelClient) -> TokenUsage:
    return client.usage_report()


async def complete_json(
    client: ModelClient,
    request: ChatRequest,
    max_retries: Optional[int] = None,
    shape: str = "object",
) -> Any:
    """
    Complete a request whose answer must contain JSON.

    On extraction failure the conversation is extended with the bad answer
    and a "Return valid JSON only." turn, up to `max_retries` times.

    Args:
        client: Backend to call
        request: Initial request
        max_retries: Re-prompts allowed; defaults to settings.json_retry_limit
        shape: "object" or "array"

    Returns:
        Parsed JSON value

    Raises:
        ParseFailure: If no attempt yields parseable JSON
    """
    retries = settings.json_retry_limit if max_retries is None else max_retries
    current = request
    last_error: Optional[JsonExtractionError] = None

    for attempt in range(retries + 1):
        completion = await client.complete(current)
        try:
            return extract_json(completion.text, shape=shape)
        except JsonExtractionError as e:
            last_error = e
            logger.warning("JSON extraction failed (attempt %d/%d): %s", attempt + 1, retries + 1, e)
            current = current.model_copy(
                update={
                    "messages": current.messages
                    + (
                        ChatMessage(role=ChatRole.ASSISTANT, content=completion.text),
                        ChatMessage(role=ChatRole.USER, content=JSON_REPROMPT),
                    )
                }
            )

    raise ParseFailure(f"No valid JSON after {retries + 1} attempts: {last_error}") from last_error


def create_client(
    backend: str,
    script_path: Optional[Path] = None,
    responder: Optional[Responder] = None,
) -> ModelClient:
    """
    Build a client for a run configuration.

    Raises:
        InvalidConfigError: For an unknown backend or a missing script
    """
    if backend == BackendKind.LIVE:
        return LiveModelClient()
    if backend == BackendKind.SCRIPTED:
        if script_path is None:
            raise InvalidConfigError("scripted backend requires a script path")
        return ScriptedModelClient.from_file(script_path, responder=responder)
    raise InvalidConfigError(f"Unknown backend '{backend}'")
