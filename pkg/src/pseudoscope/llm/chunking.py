from ..errors import InvalidValue


def chunk_text(content: str, chunk_chars: int, overlap: int = 0) -> list[str]:
    """
    Splits rendered activity text into chunks of at most about chunk_chars characters.
    Prefers to cut at blank lines (activity boundaries), then at line breaks.
    `overlap` characters of the previous chunk are repeated at the start of the next one.
    """
    if chunk_chars <= 0:
        raise InvalidValue(f"chunk_chars must be positive, got {chunk_chars}")
    if not content.strip():
        return []

    chunks = []
    current_pos = 0
    while current_pos < len(content):
        ideal_end_pos = current_pos + chunk_chars
        if ideal_end_pos >= len(content):
            chunks.append(content[current_pos:])
            break

        # Only look back half a chunk for a break point.
        search_start = max(current_pos, ideal_end_pos - chunk_chars // 2)
        actual_end_pos = ideal_end_pos
        activity_break = content.rfind("\n\n", search_start, ideal_end_pos)
        if activity_break > current_pos:
            actual_end_pos = activity_break + 2
        else:
            line_break = content.rfind("\n", search_start, ideal_end_pos)
            if line_break > current_pos:
                actual_end_pos = line_break + 1

        # A break right after the start would produce a sliver; hard cut instead.
        if actual_end_pos - current_pos < chunk_chars // 10:
            actual_end_pos = ideal_end_pos

        piece = content[current_pos:actual_end_pos]
        if piece.strip():
            chunks.append(piece)
        current_pos = max(current_pos + 1, actual_end_pos - overlap)

    return [chunk for chunk in chunks if chunk.strip()]
