"""HTTP plumbing shared by the remote chat, embedding, scoring, and
detector clients: JSON POST with bounded retries and exponential backoff."""

from __future__ import annotations

import logging
import time

import requests

from .errors import RemoteServiceError

logger = logging.getLogger(__name__)


def post_json_with_retries(url: str, payload: dict, *, timeout: float = 30.0,
                           retries: int = 3, backoff: float = 1.0,
                           api_key: str | None = None):
    """POST a JSON payload; retry transient failures with backoff.

    `retries` counts additional attempts after the first. Raises
    RemoteServiceError once the budget is exhausted.
    """
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    attempts = retries + 1
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            resp = requests.post(url, json=payload, timeout=timeout, headers=headers)
            if resp.status_code >= 500:
                raise RemoteServiceError(f"server error {resp.status_code} from {url}")
            if resp.status_code >= 400:
                # client errors are not retryable
                raise RemoteServiceError(
                    f"request rejected ({resp.status_code}) by {url}: {resp.text[:200]}")
            return resp.json()
        except RemoteServiceError as exc:
            if "rejected" in str(exc):
                raise
            last_error = exc
        except (requests.RequestException, ValueError) as exc:
            last_error = exc
        if attempt + 1 < attempts:
            delay = backoff * (2 ** attempt)
            logger.warning("retrying %s after failure (%s), attempt %d/%d",
                           url, last_error, attempt + 1, attempts)
            time.sleep(delay)
    raise RemoteServiceError(f"request to {url} failed after {attempts} attempts: "
                             f"{last_error}")
