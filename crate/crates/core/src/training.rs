// training module placeholder
