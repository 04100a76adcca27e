import logging
import os

import backoff
from google import genai
from google.genai import errors as genai_errors
from google.genai.types import Content, GenerateContentConfig, GenerateContentResponse, Part

from ..errors import AuthMissing, TransportError
from ..utils import count_tokens
from .gateway import API_KEY_ENV, RETRYABLE_STATUS_CODES, BackendReply, ChatRequest, RetryConfig, Role

logger = logging.getLogger(__name__)


def _is_permanent(error: Exception) -> bool:
    return getattr(error, "code", None) not in RETRYABLE_STATUS_CODES


class GeminiBackend:
    """Remote backend for the Google Gemini API (google-genai async client)."""

    def __init__(self, model: str, api_key_env: str = API_KEY_ENV, retry: RetryConfig = RetryConfig()):
        self.model = model
        self.api_key_env = api_key_env
        self.retry = retry

    def _api_key(self) -> str:
        api_key = os.environ.get(self.api_key_env) or os.environ.get("GEMINI_API_KEY")
        if not api_key:
            logger.error("Gemini API key is required but was not provided.")
            raise AuthMissing(self.api_key_env)
        return api_key

    @staticmethod
    def _contents(request: ChatRequest) -> tuple[str, list[Content]]:
        system_parts = [request.system_prompt] if request.system_prompt else []
        contents = []
        for message in request.messages:
            if message.role is Role.SYSTEM:
                system_parts.append(message.content)
                continue
            role = "model" if message.role is Role.ASSISTANT else "user"
            contents.append(Content(role=role, parts=[Part(text=message.content)]))
        return "\n\n".join(system_parts), contents

    async def generate(self, request: ChatRequest) -> BackendReply:
        client = genai.Client(api_key=self._api_key())
        system_instruction, contents = self._contents(request)
        config = GenerateContentConfig(
            temperature=request.temperature,
            max_output_tokens=request.max_output_tokens,
            system_instruction=system_instruction or None,
        )
        logger.info(f"Attempting to generate content with Gemini model: {self.model}")

        generate_with_retry = backoff.on_exception(
            backoff.expo,
            genai_errors.APIError,
            max_tries=self.retry.max_attempts,
            giveup=_is_permanent,
            factor=self.retry.base_delay,
            max_value=self.retry.max_delay,
            jitter=None,
        )(client.aio.models.generate_content)
        try:
            response: GenerateContentResponse = await generate_with_retry(
                model=self.model, contents=contents, config=config
            )
        except genai_errors.APIError as e:
            raise TransportError(f"Gemini API call failed: {e}", getattr(e, "code", None)) from e

        # Blocking is reported on the prompt, not on a candidate.
        if response.prompt_feedback and response.prompt_feedback.block_reason:
            reason = response.prompt_feedback.block_reason.name
            raise TransportError(f"Gemini content generation blocked. Reason: {reason}")
        if not response.candidates:
            raise TransportError("Gemini response contained no candidates.")

        candidate = response.candidates[0]
        finish_reason = candidate.finish_reason.name if candidate.finish_reason else "UNKNOWN"
        if finish_reason == "MAX_TOKENS":
            logger.warning("Gemini generation stopped due to MAX_TOKENS limit. Output may be truncated.")
        elif finish_reason in ("SAFETY", "RECITATION"):
            raise TransportError(f"Gemini generation stopped due to {finish_reason} filters on the output.")

        text_parts = []
        if candidate.content and candidate.content.parts:
            text_parts = [part.text for part in candidate.content.parts if part.text is not None]
        text = "".join(text_parts).strip()

        usage = response.usage_metadata
        if usage and usage.prompt_token_count is not None and usage.candidates_token_count is not None:
            return BackendReply(text, usage.prompt_token_count, usage.candidates_token_count)
        prompt_text = "\n".join([system_instruction, *(m.content for m in request.messages)])
        return BackendReply(text, count_tokens(prompt_text), count_tokens(text), approximate=True)
