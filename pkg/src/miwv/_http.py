"""Small JSON-over-HTTP helper shared by the remote backends."""

from __future__ import annotations

import time

import requests

from .errors import BackendUnavailableError, MalformedResponseError


def post_json(
    url: str,
    payload: dict,
    *,
    timeout: float = 60.0,
    retries: int = 2,
    backoff: float = 0.25,
) -> dict:
    """POST a JSON payload and decode a JSON object reply.

    Transport failures and 5xx replies are retried ``retries`` extra times
    with linear backoff, then surface as BackendUnavailableError. A reply
    that is not a JSON object raises MalformedResponseError.
    """
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            last = exc
        else:
            if resp.status_code >= 500:
                last = BackendUnavailableError(f"{url}: server error {resp.status_code}")
            elif resp.status_code != 200:
                raise MalformedResponseError(f"{url}: unexpected status {resp.status_code}")
            else:
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise MalformedResponseError(f"{url}: reply is not JSON") from exc
                if not isinstance(data, dict):
                    raise MalformedResponseError(f"{url}: reply is not a JSON object")
                return data
        if attempt < retries:
            time.sleep(backoff * (attempt + 1))
    raise BackendUnavailableError(f"{url}: {last}")
