"""Prompt templates sent to the chat endpoint.

The detection and coherence templates are reproduced exactly; trained
detectors and judges are sensitive to their wording. Caption templates are
local and carry their own version so cached responses can be invalidated.
"""

import re

PROMPT_VERSION = "1"

DETECTION_SYSTEM_PROMPT = """\
You are a system that detects differences between two images.

- Extract the elements that are changed in the second image with respect to the first one.
- Create a new entry for each distinct change.
- For each entry, use the following format:
"<CHANGE_COMMAND>: <CHANGED_ELEMENT>, (<BOUNDING_BOX>)"

CHANGE_COMMAND:
- ADD: If a new element appears in the second image that was not present in the first.
- REMOVE: If an element from the first image is missing in the second.
- EDIT: If an element in the second image is different but in the same location as an element in the first image.

CHANGED_ELEMENT: Describe the element that has changed.

BOUNDING_BOX: Use normalized coordinates [x0, y0, x1, y1] for the changed element position in the second image, \
where (x0, y0) is the top-left corner, and (x1, y1) is the bottom-right corner. The coordinates should be scaled \
between 0 and 1, with 0 representing one edge of the image and 1 representing the opposite edge."""

COHERENCE_SYSTEM_PROMPT = """\
You are evaluating if a specific change detected by an AI vision model matches the request in the original edit prompt.

## Task
Determine if the detected change, as described and bounded by the provided colored bbox, matches the request in the original edit prompt.
A match is valid only if the localized detected change is 100% compatible with the requested prompt.
Any unwanted modification of the original image (even small) should avoid a match.

## Context
- The original image and the edited image are provided, in this order. The edited image is \
the original with some changes applied. Focus only on the area specified by the bbox in the detected change.
- Another AI model has detected a change in the image, including its bbox.
    - ADD: An object is only added in the edited image (on the background).
    - EDIT: An object is substituted with another one in the edited image.
    - REMOVE: An object is removed in the edited image.
- Be strict: An EDIT means that an object has been removed and substituted with another one, \
ensure nothing was removed unless explicitly stated in the prompt. If an object has been removed unexpectedly, then you should say NO.

## Example Response
- Reasoning: <REASONING>
- Decision: "YES" or "NO\""""

COHERENCE_USER_TEMPLATE = """\
## Instructions
1. The original edit prompt is: {SUBSTITUTE_PROMPT}
2. The detected change to evaluate is: {SUBSTITUTE_CHANGE}
3. Use only the text and the observations from the specified bbox area (colored) in both the \
original and edited images to decide if the specific detected change aligns with the original edit prompt."""

CAPTION_SYSTEM_PROMPT = "You write short, literal captions of photographs."
CAPTION_USER_PROMPT = "Describe this image in one sentence. Mention the main objects and their colors."

COMPOSE_SYSTEM_PROMPT = "You rewrite image captions to reflect a requested edit."
COMPOSE_USER_TEMPLATE = """\
Caption of the original image: {CAPTION}
Edit instruction: {PROMPT}
Write one sentence describing the image after the edit has been applied exactly as instructed. \
Reply with the caption only."""


def _fill(template: str, values: dict[str, str]) -> str:
    # single pass, so braces inside user text are never re-expanded
    return re.sub(r"\{([A-Z_]+)\}", lambda m: values.get(m.group(1), m.group(0)), template)


def fill_coherence(prompt: str, change: str) -> str:
    return _fill(COHERENCE_USER_TEMPLATE, {"SUBSTITUTE_PROMPT": prompt, "SUBSTITUTE_CHANGE": change})


def fill_compose(caption: str, prompt: str) -> str:
    return _fill(COMPOSE_USER_TEMPLATE, {"CAPTION": caption, "PROMPT": prompt})
