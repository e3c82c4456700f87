from .client import ClientSession, CoralApiError, MentionEvent, MentionLoop

__all__ = ["ClientSession", "CoralApiError", "MentionEvent", "MentionLoop"]
