# Context-boosted landmark localization toolkit
