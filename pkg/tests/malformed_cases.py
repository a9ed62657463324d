"""Hand-written malformed protocol inputs and the typed error each must raise.

Each entry is ``(kind, text, error name)`` where ``kind`` selects the
entry point: ``envelope``, ``turn1`` or ``turn2``.
"""

MALFORMED = [
    # envelope
    ("envelope", "<think>x</think>", "MissingBlock"),
    ("envelope", "<answer>y</answer>", "MissingBlock"),
    ("envelope", "", "MissingBlock"),
    ("envelope", "just prose, no tags", "MissingBlock"),
    ("envelope", "<answer>a</answer><answer>b</answer><think>t</think>", "DuplicateBlock"),
    ("envelope", "<think>a</think><think>b</think><answer>c</answer>", "DuplicateBlock"),
    ("envelope", "<think>x</think><answer>y", "UnclosedBlock"),
    ("envelope", "<think>x<answer>y</answer>", "UnclosedBlock"),
    ("envelope", "</think>x<think><answer>y</answer>", "UnclosedBlock"),
    ("envelope", "<think>x</think>y</answer>", "UnclosedBlock"),
    ("envelope", "<think>x</think><answer>y</answer> trailing", "StrayText"),
    ("envelope", "preamble <think>x</think><answer>y</answer>", "StrayText"),
    ("envelope", "<think>x</think> between <answer>y</answer>", "StrayText"),
    ("envelope", "<think>x<answer>y</answer></think>", "StrayText"),
    # turn 1
    ("turn1", "person, [0,0,50] ; image_crop", "MalformedBox"),
    ("turn1", "person, [0,0,50,100,7] ; image_crop", "MalformedBox"),
    ("turn1", "person, [a,0,50,100] ; ", "MalformedBox"),
    ("turn1", "person, (0,0,50,100) ; ", "MalformedBox"),
    ("turn1", "person, [0,0,50,100 ; ", "MalformedBox"),
    ("turn1", "person, [50,0,10,100] ; ", "MalformedBox"),
    ("turn1", "person, [-1,0,10,100] ; ", "MalformedBox"),
    ("turn1", "[0,0,1,1], person ; ", "MalformedBox"),
    ("turn1", "person, [0,0,1,1], [2,2,3,3] ; ", "MalformedBox"),
    ("turn1", "person, , [0,0,1,1] ; ", "MalformedBox"),
    ("turn1", "person, [0,0,1,,1] ; ", "MalformedBox"),
    ("turn1", "person, [] ; ", "MalformedBox"),
    ("turn1", "person, [0,0,50,100] ; zoom", "UnknownTool"),
    ("turn1", "person, [0,0,50,100] ; image_crop, paint", "UnknownTool"),
    ("turn1", "; crop", "UnknownTool"),
    ("turn1", "; image crop", "UnknownTool"),
    ("turn1", "person ; image_crop", "DanglingLabel"),
    ("turn1", "person, [0,0,50,100], bicycle ; ", "DanglingLabel"),
    ("turn1", "person, [0,0,50,100], bicycle, ; ", "DanglingLabel"),
    ("turn1", "person, [0,0,50,100] image_crop", "MissingSeparator"),
    ("turn1", "", "MissingSeparator"),
    ("turn1", "person, [0,0,50,100] ; image_crop ; outpaint", "MultipleSeparators"),
    ("turn1", ";;", "MultipleSeparators"),
    # turn 2
    ("turn2", "1: ride bicycle [0,0,50,100]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,50,100]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,50,100], [0,0,1]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,50,100], [0,0,1,1], extra", "MalformedRecord"),
    ("turn2", "ride, bicycle, [0,0,50,100], [0,0,1,1]", "MalformedRecord"),
    ("turn2", "1: ride, , [0,0,50,100], [0,0,1,1]", "MalformedRecord"),
    ("turn2", "0: ride, bicycle, [0,0,50,100], [0,0,1,1]", "MalformedRecord"),
    ("turn2", "note 1: ride, bicycle, [0,0,50,100], [0,0,1,1]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,5,5], [0,0,1,1], 2: hold, cup, [1,1,2,2]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,5,5], [9,9,1,1]", "MalformedRecord"),
    ("turn2", "1: ride, bicycle, [0,0,5,5], [0,0,1,1], 1: hold, cup, [1,1,2,2], [3,3,4,4]", "DuplicateIndex"),
    ("turn2", "2: a, b, [0,0,1,1], [0,0,1,1], 3: c, d, [0,0,1,1], [0,0,1,1], 2: e, f, [0,0,1,1], [0,0,1,1]",
     "DuplicateIndex"),
    ("turn2", "   ", "EmptyAnswer"),
]
