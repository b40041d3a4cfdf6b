#pragma once

#include <array>
#include <string_view>

namespace bistet {

// 1000 common lowercase English words, lengths 1 to 8, used as the
// default sampling pool for synthetic text images.
inline constexpr std::array<std::string_view, 1000> kWordList = {
    "a", "able", "about", "above", "absent", "abuse", "acid", "across",
    "act", "actor", "adapt", "add", "adjust", "admit", "adopt", "adult",
    "advice", "afford", "after", "again", "age", "agenda", "ago", "agree",
    "air", "alarm", "album", "alert", "all", "alley", "almost", "alone",
    "along", "also", "always", "ambush", "amend", "among", "ample",
    "anchor", "and", "angle", "angry", "animal", "ankle", "annual",
    "answer", "any", "apart", "apology", "appeal", "appear", "apple",
    "apron", "arcade", "arch", "area", "arena", "argue", "arm", "army",
    "around", "arrow", "art", "ask", "aspect", "asset", "assist", "assume",
    "atlas", "attic", "audio", "august", "aunt", "autumn", "avenue",
    "away", "baby", "back", "bad", "bag", "ball", "band", "bank", "base",
    "basket", "be", "bear", "beat", "became", "because", "become", "bed",
    "been", "before", "began", "begin", "behind", "bell", "belong",
    "below", "beside", "best", "better", "between", "big", "bird", "bit",
    "black", "blood", "blow", "blue", "board", "boat", "body", "bone",
    "book", "born", "both", "bottle", "bottom", "box", "boy", "branch",
    "bread", "break", "bright", "bring", "broad", "broke", "brother",
    "brought", "brown", "build", "burn", "busy", "but", "buy", "by",
    "cake", "call", "came", "camp", "can", "capital", "captain", "car",
    "card", "care", "carry", "case", "cat", "catch", "cattle", "caught",
    "cause", "cell", "cent", "center", "century", "chair", "chance",
    "change", "charge", "chart", "check", "chick", "chief", "child",
    "children", "choose", "circle", "city", "claim", "class", "clean",
    "clear", "climb", "clock", "close", "cloth", "cloud", "coast", "coat",
    "cold", "collect", "color", "column", "come", "common", "company",
    "compare", "consider", "contain", "continue", "control", "cook",
    "cool", "copy", "corn", "corner", "correct", "cost", "cotton", "could",
    "count", "country", "course", "cover", "cow", "crease", "create",
    "crop", "cross", "crowd", "cry", "current", "cut", "dance", "danger",
    "dark", "day", "dead", "deal", "dear", "death", "decide", "decimal",
    "deep", "degree", "depend", "desert", "design", "desk", "detail",
    "did", "die", "differ", "dinner", "direct", "do", "doctor", "does",
    "dog", "dollar", "done", "door", "double", "down", "draw", "dream",
    "dress", "drink", "drive", "drop", "dry", "duck", "during", "dust",
    "duty", "each", "ear", "early", "earth", "east", "easy", "eat", "edge",
    "effect", "egg", "eight", "either", "electric", "element", "else",
    "end", "enemy", "energy", "engine", "enough", "enter", "entire",
    "equal", "equate", "escape", "even", "evening", "event", "ever",
    "every", "exact", "example", "except", "excite", "exercise", "expect",
    "expert", "eye", "face", "fact", "fair", "fall", "family", "famous",
    "far", "farm", "fast", "fat", "father", "favor", "fear", "feed",
    "feel", "feet", "fell", "felt", "few", "field", "fig", "fight",
    "figure", "fill", "final", "find", "fine", "finger", "finish", "fire",
    "first", "fish", "fit", "five", "flat", "floor", "flow", "flower",
    "fly", "follow", "food", "foot", "for", "force", "forest", "form",
    "forward", "found", "four", "fraction", "free", "fresh", "friend",
    "from", "front", "fruit", "full", "fun", "gain", "game", "garden",
    "gas", "gather", "gave", "general", "gentle", "get", "girl", "give",
    "glad", "glass", "go", "gold", "gone", "good", "got", "govern",
    "grand", "grass", "gray", "great", "green", "grew", "ground", "group",
    "grow", "guess", "guide", "gun", "had", "hair", "half", "hand",
    "happen", "happy", "hard", "has", "hat", "have", "he", "head", "hear",
    "heard", "heart", "heat", "heavy", "held", "help", "her", "here",
    "high", "hill", "him", "his", "history", "hit", "hold", "hole", "home",
    "hope", "horse", "hot", "hour", "house", "how", "huge", "human",
    "hundred", "hunt", "hurry", "hurt", "ice", "idea", "if", "in", "inch",
    "include", "indicate", "industry", "insect", "instant", "interest",
    "invent", "iron", "is", "island", "it", "job", "join", "joy", "jump",
    "just", "keep", "kept", "key", "kill", "kind", "king", "knew", "know",
    "lady", "lake", "land", "large", "last", "late", "laugh", "law", "lay",
    "lead", "learn", "least", "leave", "led", "left", "leg", "length",
    "less", "let", "letter", "level", "lie", "life", "lift", "light",
    "like", "line", "list", "listen", "little", "live", "locate", "log",
    "lone", "long", "look", "lost", "lot", "loud", "love", "low",
    "machine", "made", "magnet", "main", "major", "make", "man", "many",
    "map", "mark", "market", "mass", "master", "match", "material",
    "matter", "may", "mean", "meant", "measure", "meat", "meet", "melody",
    "men", "metal", "method", "middle", "might", "mile", "milk", "million",
    "mind", "mine", "minute", "miss", "mix", "modern", "moment", "money",
    "month", "moon", "more", "morning", "most", "mother", "motion",
    "mount", "mouth", "move", "much", "multiply", "music", "must", "my",
    "name", "nation", "nature", "near", "neck", "need", "never", "new",
    "next", "night", "nine", "no", "noise", "noon", "north", "nose",
    "note", "nothing", "notice", "noun", "now", "number", "numeral",
    "object", "observe", "occur", "ocean", "of", "off", "offer", "office",
    "often", "oh", "oil", "old", "on", "once", "one", "only", "open",
    "operate", "or", "order", "organ", "other", "our", "out", "over",
    "own", "oxygen", "page", "paint", "pair", "paper", "part", "party",
    "pass", "past", "path", "pattern", "pay", "people", "per", "perhaps",
    "period", "person", "phrase", "pick", "picture", "piece", "pitch",
    "place", "plain", "plan", "plane", "planet", "plant", "play", "please",
    "plural", "poem", "point", "pole", "poor", "port", "pose", "position",
    "possible", "post", "pound", "power", "practice", "prepare", "press",
    "pretty", "print", "probable", "problem", "process", "produce",
    "product", "proper", "property", "protect", "prove", "provide", "pull",
    "push", "put", "quart", "question", "quick", "quiet", "quite", "race",
    "radio", "rail", "rain", "raise", "ran", "range", "rather", "reach",
    "read", "ready", "real", "reason", "receive", "record", "red",
    "region", "remain", "repeat", "reply", "require", "rest", "result",
    "rich", "ride", "right", "ring", "rise", "river", "road", "rock",
    "roll", "room", "root", "rope", "rose", "round", "row", "rule", "run",
    "safe", "said", "sail", "salt", "same", "sand", "sat", "save", "saw",
    "say", "scale", "school", "science", "score", "sea", "search",
    "season", "seat", "second", "section", "see", "seed", "seem",
    "segment", "select", "self", "sell", "send", "sense", "sent",
    "sentence", "serve", "set", "settle", "seven", "several", "shall",
    "shape", "share", "sharp", "she", "sheet", "shell", "shine", "ship",
    "shoe", "shop", "shore", "short", "should", "shoulder", "shout",
    "show", "side", "sight", "sign", "silent", "silver", "similar",
    "simple", "since", "sing", "single", "sister", "sit", "six", "size",
    "skill", "skin", "sky", "sleep", "slip", "slow", "small", "smell",
    "smile", "snow", "so", "soft", "soil", "soldier", "solve", "some",
    "son", "song", "soon", "sound", "south", "space", "speak", "special",
    "speech", "speed", "spell", "spend", "spoke", "spot", "spread",
    "spring", "square", "stand", "star", "start", "state", "station",
    "stay", "stead", "steam", "steel", "step", "stick", "still", "stone",
    "stood", "stop", "store", "story", "straight", "strange", "stream",
    "street", "stretch", "string", "strong", "student", "study", "subject",
    "such", "sudden", "suffix", "sugar", "suggest", "suit", "summer",
    "sun", "supply", "support", "sure", "surface", "swim", "symbol",
    "system", "table", "tail", "take", "talk", "tall", "teach", "team",
    "teeth", "tell", "temper", "ten", "term", "test", "than", "that",
    "the", "their", "them", "then", "there", "these", "they", "thick",
    "thin", "thing", "think", "third", "this", "those", "though",
    "thought", "thousand", "three", "through", "throw", "thus", "tie",
    "time", "tiny", "tire", "to", "together", "told", "tone", "too",
    "took", "tool", "top", "total", "touch", "toward", "town", "track",
    "trade", "train", "travel", "tree", "triangle", "trip", "trouble",
    "truck", "true", "try", "tube", "turn", "twenty", "two", "type",
    "under", "unit", "until", "up", "us", "use", "usual", "valley",
    "value", "vary", "verb", "very", "view", "village", "visit", "voice",
    "vowel", "wait", "walk", "wall", "want", "war", "warm", "was", "wash",
    "watch", "water", "wave", "way", "we", "wear", "weather", "week",
    "weight", "well", "went", "were", "west", "what", "wheel", "when",
    "where", "whether", "which", "while", "white", "who", "whole", "whose",
    "why", "wide", "wife", "wild", "will", "win", "wind", "window", "wing",
    "winter", "wire", "wish", "with", "woman", "women", "wonder", "wood",
    "word", "wore", "work", "world", "would", "write", "written", "wrong",
    "wrote", "yard", "year", "yellow", "yes", "yet", "you", "young",
    "your",
};

}  // namespace bistet
