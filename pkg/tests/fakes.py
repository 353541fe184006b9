"""Hand-rolled service doubles."""

from figa.errors import ServiceError


class Scripted:
    """Completion service that replays canned replies and records prompts."""

    identity = "scripted"

    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt, **params):
        self.prompts.append(prompt)
        reply = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        if isinstance(reply, Exception):
            raise reply
        return reply


class Failing:
    identity = "failing"

    def __init__(self, exc=None):
        self.calls = 0
        self.exc = exc or ServiceError("down")

    def complete(self, prompt, **params):
        self.calls += 1
        raise self.exc

    def score(self, query, response, reference=None):
        self.calls += 1
        raise self.exc
