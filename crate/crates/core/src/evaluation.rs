// evaluation placeholder
